//! Volumetric feature extractor with Gram–Schmidt channel attention.
//!
//! Three conv → relu → 2x2x2 max-pool units (1→8→16→32 channels) shrink a
//! `V³` volume to `32 x (V/8)³` maps. Each channel's "novel energy" after
//! modified Gram–Schmidt against the preceding channels feeds a two-layer
//! attention MLP whose sigmoid outputs reweight the maps. The flattened maps
//! go through FC1 (features `F`) and FC2 (auxiliary class logits).
//!
//! Inputs that are already feature vectors use [`VectorEncoderParams`]
//! instead: a single dense layer with tanh plus the same auxiliary head.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_tensor, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHANNELS: [usize; 3] = [8, 16, 32];
pub const ATTENTION_HIDDEN: usize = 16;
pub const GRAM_SCHMIDT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorParams {
    pub conv_kernels: [ParamId; 3],
    pub conv_bias: [ParamId; 3],
    pub att_w1: ParamId,
    pub att_b1: ParamId,
    pub att_w2: ParamId,
    pub att_b2: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub extent: usize,
}

impl ExtractorParams {
    /// Registers extractor weights for `extent³` volumes.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        extent: usize,
        feature_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_extent(extent)?;
        let mut cin = 1;
        let mut conv_kernels = Vec::new();
        let mut conv_bias = Vec::new();
        for (i, &cout) in CHANNELS.iter().enumerate() {
            conv_kernels.push(store.add(
                format!("extractor.conv{i}.kernel"),
                fan_in_tensor(&[cout, cin, 3, 3, 3], cin * 27, 2f64.sqrt(), rng),
            ));
            conv_bias.push(store.add(format!("extractor.conv{i}.bias"), Tensor::zeros(&[cout])));
            cin = cout;
        }
        let c = CHANNELS[2];
        let flat = c * (extent / 8).pow(3);
        Ok(Self {
            conv_kernels: [conv_kernels[0], conv_kernels[1], conv_kernels[2]],
            conv_bias: [conv_bias[0], conv_bias[1], conv_bias[2]],
            att_w1: store.add(
                "extractor.attention.w1",
                fan_in_tensor(&[ATTENTION_HIDDEN, c], c, 1.0, rng),
            ),
            att_b1: store.add("extractor.attention.b1", Tensor::zeros(&[ATTENTION_HIDDEN, 1])),
            att_w2: store.add(
                "extractor.attention.w2",
                fan_in_tensor(&[c, ATTENTION_HIDDEN], ATTENTION_HIDDEN, 1.0, rng),
            ),
            att_b2: store.add("extractor.attention.b2", Tensor::zeros(&[c, 1])),
            fc1_w: store.add(
                "extractor.fc1.w",
                fan_in_tensor(&[feature_dim, flat], flat, 1.0, rng),
            ),
            fc1_b: store.add("extractor.fc1.b", Tensor::zeros(&[feature_dim, 1])),
            fc2_w: store.add(
                "extractor.fc2.w",
                fan_in_tensor(&[classes, feature_dim], feature_dim, 1.0, rng),
            ),
            fc2_b: store.add("extractor.fc2.b", Tensor::zeros(&[classes, 1])),
            extent,
        })
    }
}

fn check_extent(extent: usize) -> Result<()> {
    if extent < 8 || !extent.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "volume extent must be a power of two >= 8, got {extent}"
        )));
    }
    Ok(())
}

/// Three conv → relu → maxpool units.
pub fn conv_pool_stack<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &ExtractorParams,
    volume: Var,
) -> Result<Var> {
    let mut x = volume;
    for i in 0..3 {
        let c = tape.conv3d(x, pv[p.conv_kernels[i]])?;
        let c = tape.add_channel_bias(c, pv[p.conv_bias[i]])?;
        let r = tape.relu(c);
        x = tape.maxpool3d(r)?;
    }
    Ok(x)
}

/// Per-channel residual energy ratio `‖u_c‖² / (‖v_c‖² + δ)` after modified
/// Gram–Schmidt in channel order. Returns a `C x 1` column in `[0, 1]`.
pub fn gram_schmidt_coeffs<T: Scalar>(tape: &mut Tape<T>, maps: Var) -> Result<Var> {
    let shape = tape.shape(maps).to_vec();
    let c = *shape.first().ok_or(Error::Empty("gram_schmidt_coeffs"))?;
    if c == 0 {
        return Err(Error::Empty("gram_schmidt_coeffs"));
    }
    let n = tape.value(maps).len() / c;
    let eps = T::lit(GRAM_SCHMIDT_EPS);
    let mut residuals: Vec<(Var, Var)> = Vec::with_capacity(c);
    let mut coeffs = Vec::with_capacity(c);
    for ch in 0..c {
        let idx: Rc<[usize]> = (ch * n..(ch + 1) * n).collect();
        let v = tape.gather(maps, idx)?;
        let mut u = v;
        for &(uj, norm_j) in &residuals {
            let d = tape.dot(u, uj)?;
            let coef = tape.div(d, norm_j)?;
            let proj = tape.mul_scalar(uj, coef)?;
            u = tape.sub(u, proj)?;
        }
        let uu = tape.dot(u, u)?;
        let vv = tape.dot(v, v)?;
        let vv = tape.add_const(vv, eps);
        coeffs.push(tape.div(uu, vv)?);
        let norm = tape.add_const(uu, eps);
        residuals.push((u, norm));
    }
    tape.concat(&coeffs)
}

/// Two-layer attention MLP: relu hidden layer, sigmoid output in `(0, 1)`.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &ExtractorParams,
    coeffs: Var,
) -> Result<Var> {
    let h = tape.affine(pv[p.att_w1], coeffs, pv[p.att_b1])?;
    let h = tape.relu(h);
    let o = tape.affine(pv[p.att_w2], h, pv[p.att_b2])?;
    Ok(tape.sigmoid(o))
}

/// Volume (`1 x V x V x V`) to feature column `F` (`O x 1`).
pub fn extract_features<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &ExtractorParams,
    volume: Var,
) -> Result<Var> {
    let maps = conv_pool_stack(tape, pv, p, volume)?;
    let coeffs = gram_schmidt_coeffs(tape, maps)?;
    let weights = channel_attention(tape, pv, p, coeffs)?;
    let reweighted = tape.scale_channels(maps, weights)?;
    let n = tape.value(reweighted).len();
    let flat = tape.reshape(reweighted, &[n, 1])?;
    tape.affine(pv[p.fc1_w], flat, pv[p.fc1_b])
}

/// Auxiliary class logits (`C x 1`) from features.
pub fn aux_logits<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    fc2_w: ParamId,
    fc2_b: ParamId,
    features: Var,
) -> Result<Var> {
    tape.affine(pv[fc2_w], features, pv[fc2_b])
}

/// Dense encoder for inputs that are already feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VectorEncoderParams {
    pub w: ParamId,
    pub b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub input_dim: usize,
}

impl VectorEncoderParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        input_dim: usize,
        feature_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(
                "encoder.w",
                fan_in_tensor(&[feature_dim, input_dim], input_dim, 1.0, rng),
            ),
            b: store.add("encoder.b", Tensor::zeros(&[feature_dim, 1])),
            fc2_w: store.add(
                "encoder.fc2.w",
                fan_in_tensor(&[classes, feature_dim], feature_dim, 1.0, rng),
            ),
            fc2_b: store.add("encoder.fc2.b", Tensor::zeros(&[classes, 1])),
            input_dim,
        }
    }
}

pub fn encode_vector<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &VectorEncoderParams,
    x: Var,
) -> Result<Var> {
    let h = tape.affine(pv[p.w], x, pv[p.b])?;
    Ok(tape.tanh(h))
}

/// Either extractor, chosen by input kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureExtractor {
    Volume(ExtractorParams),
    Vector(VectorEncoderParams),
}

impl FeatureExtractor {
    /// Returns `(F, aux_logits)` for one visit payload.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        payload: Var,
    ) -> Result<(Var, Var)> {
        match self {
            FeatureExtractor::Volume(p) => {
                let f = extract_features(tape, pv, p, payload)?;
                let logits = aux_logits(tape, pv, p.fc2_w, p.fc2_b, f)?;
                Ok((f, logits))
            }
            FeatureExtractor::Vector(p) => {
                let f = encode_vector(tape, pv, p, payload)?;
                let logits = aux_logits(tape, pv, p.fc2_w, p.fc2_b, f)?;
                Ok((f, logits))
            }
        }
    }
}
