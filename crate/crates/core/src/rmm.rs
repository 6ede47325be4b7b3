//! Multimodal fusion, manifold lift and task decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_tensor, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::space::{Space, TriLayout};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const COVARIANCE_RIDGE: f64 = 1e-4;
/// Value fed to the encoder for unobserved normalized scores.
pub const IMPUTED_SCORE: f64 = 0.5;

/// Concatenates features `F` (`O x 1`) with the score block. Unobserved
/// scores are replaced by [`IMPUTED_SCORE`]. Returns a `(O+K) x 1` column.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, features: Var, scores: &[T], mask: &[bool]) -> Result<Var> {
    if scores.len() != mask.len() {
        return Err(Error::DimMismatch(scores.len(), mask.len()));
    }
    let block: Vec<T> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { s } else { T::lit(IMPUTED_SCORE) })
        .collect();
    let s = tape.constant(Tensor::column(block));
    tape.concat(&[features, s])
}

/// Treats `m` as a one-channel signal of length `W` and applies a kernel-3
/// convolution with `Q` output channels: `Q x W`.
pub fn lift_channels<T: Scalar>(tape: &mut Tape<T>, m: Var, kernel: Var) -> Result<Var> {
    let w = tape.value(m).len();
    if w < 3 {
        return Err(Error::InvalidArgument {
            op: "lift_channels",
            msg: format!("signal length {w} is below the kernel size 3"),
        });
    }
    let row = tape.reshape(m, &[1, w])?;
    tape.conv1d(row, kernel)
}

/// Covariance across positions plus ridge, then Cholesky: the point `E`.
pub fn to_manifold<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let cov = tape.covariance_rows(x, T::lit(COVARIANCE_RIDGE))?;
    tape.cholesky(cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiftParams {
    pub kernel: ParamId,
}

impl LiftParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, q: usize, rng: &mut R) -> Self {
        Self {
            kernel: store.add("rmm.lift.kernel", fan_in_tensor(&[q, 1, 3], 3, 1.0, rng)),
        }
    }
}

/// Fused vector to `E` through lift, covariance and Cholesky.
pub fn rmm_encode<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, p: &LiftParams, m: Var) -> Result<Var> {
    let lifted = lift_channels(tape, m, pv[p.kernel])?;
    to_manifold(tape, lifted)
}

/// Dense map from the fused vector straight to log-coordinates; replaces the
/// covariance lift in the ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatEncoderParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl FlatEncoderParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        input_dim: usize,
        packed: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(
                "flat_encoder.w",
                fan_in_tensor(&[packed, input_dim], input_dim, 0.5, rng),
            ),
            b: store.add("flat_encoder.b", Tensor::zeros(&[packed, 1])),
        }
    }
}

pub fn flat_encode<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &FlatEncoderParams,
    space: Space,
    layout: &TriLayout,
    m: Var,
) -> Result<Var> {
    let v = tape.affine(pv[p.w], m, pv[p.b])?;
    space.unvectorize(tape, v, layout)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderParams {
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub reg_w: ParamId,
    pub reg_b: ParamId,
}

impl DecoderParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        packed: usize,
        classes: usize,
        scores: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            cls_w: store.add(
                "decoder.cls.w",
                fan_in_tensor(&[classes, packed], packed, 1.0, rng),
            ),
            cls_b: store.add("decoder.cls.b", Tensor::zeros(&[classes, 1])),
            reg_w: store.add(
                "decoder.reg.w",
                fan_in_tensor(&[scores, packed], packed, 1.0, rng),
            ),
            reg_b: store.add("decoder.reg.b", Tensor::zeros(&[scores, 1])),
        }
    }
}

/// Hidden state to `(class probabilities 1 x C, scores R x 1)`.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &DecoderParams,
    space: Space,
    layout: &TriLayout,
    h: Var,
) -> Result<(Var, Var)> {
    let v = space.vectorize(tape, h, layout)?;
    let logits = tape.affine(pv[p.cls_w], v, pv[p.cls_b])?;
    let c = tape.value(logits).len();
    let row = tape.reshape(logits, &[1, c])?;
    let probs = tape.softmax_rows(row)?;
    let raw = tape.affine(pv[p.reg_w], v, pv[p.reg_b])?;
    let scores = tape.sigmoid(raw);
    Ok((probs, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CholPoint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fuse_imputes_and_concatenates() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::column(vec![0.1, 0.2]));
        let m = fuse(&mut tape, f, &[0.9, 0.8, 0.7], &[true, true, true]).unwrap();
        assert_eq!(tape.value(m).data(), &[0.1, 0.2, 0.9, 0.8, 0.7]);
        let m = fuse(&mut tape, f, &[0.9, 0.8, 0.7], &[false; 3]).unwrap();
        assert_eq!(tape.value(m).data(), &[0.1, 0.2, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn lift_zero_and_identity_kernels() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::column(vec![0.3, -1.0, 2.0, 0.5]));
        let zero = tape.constant(Tensor::zeros(&[3, 1, 3]));
        let y = lift_channels(&mut tape, m, zero).unwrap();
        assert_eq!(tape.shape(y), &[3, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let mut k = Tensor::zeros(&[2, 1, 3]);
        k.data_mut()[1] = 1.0;
        k.data_mut()[4] = 1.0;
        let k = tape.constant(k);
        let y = lift_channels(&mut tape, m, k).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -1.0, 2.0, 0.5, 0.3, -1.0, 2.0, 0.5]);
        let short = tape.constant(Tensor::column(vec![1.0, 2.0]));
        assert!(lift_channels(&mut tape, short, k).is_err());
    }

    #[test]
    fn constant_rows_map_to_scaled_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[3, 5], 0.7));
        let e = to_manifold(&mut tape, x).unwrap();
        let want = COVARIANCE_RIDGE.sqrt();
        let v = tape.value(e);
        for i in 0..3 {
            for j in 0..3 {
                let w = if i == j { want } else { 0.0 };
                assert!((v.at(i, j) - w).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_decoder_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let p = DecoderParams::init(&mut store, 6, 3, 3, &mut rng);
        for id in [p.cls_w, p.reg_w] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let pv = store.as_constants(&mut tape);
        let h = tape.constant(CholPoint::from_packed(vec![1.2, 0.3, 0.8, -0.1, 0.2, 2.0]).unwrap().to_tensor());
        let layout = TriLayout::new(3);
        let (probs, scores) = decode(&mut tape, &pv, &p, Space::Manifold, &layout, h).unwrap();
        for &pr in tape.value(probs).data() {
            assert!((pr - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(tape.value(scores).data().iter().all(|&s| s == 0.5));
    }
}
