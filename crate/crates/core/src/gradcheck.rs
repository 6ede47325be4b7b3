//! Central-difference verification of tape gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::normal_tensor;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, UnaryKind};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Worst coordinate found by [`gradient_check_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Builds the scalar function on a fresh tape from parameter leaves.
pub trait ScalarFn<T>: Fn(&mut Tape<T>, &[Var]) -> Result<Var> {}
impl<T, F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>> ScalarFn<T> for F {}

fn evaluate<T: Scalar>(f: &impl ScalarFn<T>, params: &[Tensor<T>]) -> Result<T> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar_value(out))
}

/// Maximum relative error between tape gradients and the fourth-order
/// five-point central difference,
/// using `max(|a|, |b|, 1e-12)` as the denominator.
pub fn gradient_check<T: Scalar>(
    f: impl ScalarFn<T>,
    params: &[Tensor<T>],
    h: T,
) -> Result<f64> {
    Ok(gradient_check_report(f, params, h)?.max_rel_err)
}

pub fn gradient_check_report<T: Scalar>(
    f: impl ScalarFn<T>,
    params: &[Tensor<T>],
    h: T,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, (p, &v)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(v, p);
        for i in 0..p.len() {
            let orig = p.data()[i];
            let mut at = |k: f64| {
                work[pi].data_mut()[i] = orig + h * T::lit(k);
                evaluate(&f, &work).map(Scalar::as_f64)
            };
            let (f2, f1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            work[pi].data_mut()[i] = orig;
            let numeric = (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * h.as_f64());
            let a = analytic.data()[i].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report = GradCheckReport {
                    max_rel_err: if rel.is_nan() { f64::INFINITY } else { rel },
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                    coordinates: report.coordinates,
                };
            }
        }
    }
    Ok(report)
}

/// Outcome of one entry of [`primitive_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl PrimitiveCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const CHOLESKY_TOL: f64 = 1e-5;

/// `Σ y ⊙ R` for a fixed random `R`, so that outputs whose entries sum to a
/// constant still produce informative gradients.
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w: Tensor<f64> = normal_tensor(&shape, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn lower_point(q: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(&[q, q], -1.0, 1.0, rng);
    for i in 0..q {
        for j in 0..q {
            if j > i {
                t.set(i, j, 0.0);
            } else if j == i {
                t.set(i, i, rng.gen_range(0.5..2.0));
            }
        }
    }
    t
}

/// Central-difference checks of every differentiable tape primitive on
/// random inputs away from kinks and ties.
pub fn primitive_suite(seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<(&'static str, Build, Vec<Tensor<f64>>, f64)> = Vec::new();
    let mut add = |name, f: Build, p: Vec<Tensor<f64>>| cases.push((name, f, p, PRIMITIVE_TOL));
    add("add", |t, v| t.add(v[0], v[1]), vec![uniform(&[3, 2], -1.0, 1.0, r), uniform(&[3, 2], -1.0, 1.0, r)]);
    add("sub", |t, v| t.sub(v[0], v[1]), vec![uniform(&[3, 2], -1.0, 1.0, r), uniform(&[3, 2], -1.0, 1.0, r)]);
    add("mul", |t, v| t.mul(v[0], v[1]), vec![uniform(&[4], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)]);
    add("div", |t, v| t.div(v[0], v[1]), vec![uniform(&[4], -1.0, 1.0, r), uniform(&[4], 0.5, 2.0, r)]);
    add("scale", |t, v| Ok(t.scale(v[0], -1.7)), vec![uniform(&[5], -1.0, 1.0, r)]);
    add("add_const", |t, v| Ok(t.add_const(v[0], 0.3)), vec![uniform(&[5], -1.0, 1.0, r)]);
    add("mul_scalar", |t, v| t.mul_scalar(v[0], v[1]), vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[1], 0.5, 1.5, r)]);
    add("matmul", |t, v| t.matmul(v[0], v[1]), vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 2], -1.0, 1.0, r)]);
    add("affine", |t, v| t.affine(v[0], v[1], v[2]), vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 1], -1.0, 1.0, r), uniform(&[3, 1], -1.0, 1.0, r)]);
    add("transpose", |t, v| t.transpose(v[0]), vec![uniform(&[2, 3], -1.0, 1.0, r)]);
    add("relu", |t, v| Ok(t.relu(v[0])), vec![Tensor::from_f64(&[4], &[-0.8, -0.2, 0.3, 1.1]).expect("shape")]);
    add("tanh", |t, v| Ok(t.tanh(v[0])), vec![uniform(&[5], -2.0, 2.0, r)]);
    add("sigmoid", |t, v| Ok(t.sigmoid(v[0])), vec![uniform(&[5], -3.0, 3.0, r)]);
    add("softplus", |t, v| Ok(t.softplus(v[0])), vec![uniform(&[5], -3.0, 3.0, r)]);
    add("exp", |t, v| Ok(t.exp(v[0])), vec![uniform(&[5], -2.0, 2.0, r)]);
    add("log", |t, v| t.log(v[0]), vec![uniform(&[5], 0.3, 3.0, r)]);
    add("tri_map", |t, v| t.tri_map(v[0], Some(UnaryKind::Tanh), Some(UnaryKind::Softplus)), vec![uniform(&[3, 3], -1.5, 1.5, r)]);
    add("tri_map_log_exp", |t, v| {
        let l = t.tri_map(v[0], None, Some(UnaryKind::Log))?;
        t.tri_map(l, Some(UnaryKind::Sigmoid), Some(UnaryKind::Exp))
    }, vec![lower_point(3, r)]);
    add("chol_group", |t, v| t.chol_group(v[0], v[1]), vec![lower_point(3, r), lower_point(3, r)]);
    add("lower_mask", |t, v| t.lower_mask(v[0]), vec![uniform(&[3, 3], -1.0, 1.0, r)]);
    add("sum", |t, v| Ok(t.sum(v[0])), vec![uniform(&[2, 2], -1.0, 1.0, r)]);
    add("dot", |t, v| t.dot(v[0], v[1]), vec![uniform(&[4], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)]);
    add("softmax_rows", |t, v| t.softmax_rows(v[0]), vec![uniform(&[2, 4], -2.0, 2.0, r)]);
    add("gather", |t, v| t.gather(v[0], Rc::from([4usize, 0, 2, 4])), vec![uniform(&[2, 3], -1.0, 1.0, r)]);
    add("scatter", |t, v| t.scatter(v[0], Rc::from([0usize, 3, 4, 8]), &[3, 3]), vec![uniform(&[4, 1], -1.0, 1.0, r)]);
    add("reshape", |t, v| t.reshape(v[0], &[3, 2]), vec![uniform(&[2, 3], -1.0, 1.0, r)]);
    add("concat", |t, v| t.concat(&[v[0], v[1]]), vec![uniform(&[3, 1], -1.0, 1.0, r), uniform(&[2, 1], -1.0, 1.0, r)]);
    add("conv3d", |t, v| t.conv3d(v[0], v[1]), vec![uniform(&[2, 4, 4, 4], -1.0, 1.0, r), uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, r)]);
    add("maxpool3d", |t, v| t.maxpool3d(v[0]), vec![uniform(&[2, 4, 4, 4], -1.0, 1.0, r)]);
    add("conv1d", |t, v| t.conv1d(v[0], v[1]), vec![uniform(&[2, 6], -1.0, 1.0, r), uniform(&[3, 2, 3], -0.5, 0.5, r)]);
    add("covariance_rows", |t, v| t.covariance_rows(v[0], 1e-4), vec![uniform(&[3, 7], -1.0, 1.0, r)]);
    add("clamp_min", |t, v| Ok(t.clamp_min(v[0], 0.0)), vec![Tensor::from_f64(&[4], &[-0.7, -0.1, 0.4, 0.9]).expect("shape")]);
    add("powf", |t, v| t.powf(v[0], 2.5), vec![uniform(&[4], 0.2, 1.5, r)]);
    add("add_channel_bias", |t, v| t.add_channel_bias(v[0], v[1]), vec![uniform(&[3, 2, 2, 2], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)]);
    add("scale_channels", |t, v| t.scale_channels(v[0], v[1]), vec![uniform(&[3, 2, 2, 2], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)]);
    // Cholesky needs a symmetric input; build one from a free matrix.
    cases.push((
        "cholesky",
        |t, v| {
            let xt = t.transpose(v[0])?;
            let a = t.matmul(v[0], xt)?;
            let ridge = t.constant(Tensor::identity(4).scaled(0.5));
            let a = t.add(a, ridge)?;
            t.cholesky(a)
        },
        vec![uniform(&[4, 4], -1.0, 1.0, r)],
        CHOLESKY_TOL,
    ));

    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, build, params, tolerance))| {
            let f = move |t: &mut Tape<f64>, v: &[Var]| {
                let y = build(t, v)?;
                readout(t, y, 1000 + i as u64)
            };
            Ok(PrimitiveCheck {
                name,
                max_rel_err: gradient_check(f, &params, DEFAULT_STEP)?,
                tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_f64(&[3, 1], &[0.3, -1.2, 2.0]).unwrap();
        let err = gradient_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let s = t.scale(v[0], 3.0);
                Ok(t.sum(s))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn every_primitive_passes() {
        for c in primitive_suite(1).unwrap() {
            assert!(c.passed(), "{}: {:e}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn softplus_composition() {
        let x = Tensor::from_f64(&[4], &[-1.0, 0.2, 0.7, 2.5]).unwrap();
        let err = gradient_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let a = t.softplus(v[0]);
                let b = t.mul(a, a)?;
                let c = t.softplus(b);
                Ok(t.sum(c))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
