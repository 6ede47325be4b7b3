//! Time-aware neural ODE between observations.
//!
//! The hidden point is moved to log-coordinates, integrated under
//! `dy/dt = ε·f_Φ([y; t̃])` where `t̃` is the normalized age, and the
//! accumulated displacement is applied back with the group operation. For a
//! zero displacement this returns the input point bit-for-bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{self, OdeSystem, SolverConfig};
use crate::params::{fan_in_tensor, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::space::{Space, TriLayout};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ODE_HIDDEN: usize = 64;

/// Affine standardization of age in years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScale {
    pub mean: f64,
    pub std: f64,
}

impl Default for TimeScale {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl TimeScale {
    pub fn from_ages(ages: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = ages.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn normalize(&self, age: f64) -> f64 {
        (age - self.mean) / self.std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEncoderParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl TimeEncoderParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>) -> Self {
        Self {
            w: store.add("tnode.time.w", Tensor::zeros(&[1])),
            b: store.add("tnode.time.b", Tensor::zeros(&[1])),
        }
    }
}

/// `ε = softplus(w·age_norm + b)`, a one-element node.
pub fn time_coefficient<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &TimeEncoderParams,
    age_norm: T,
) -> Result<Var> {
    let wa = tape.scale(pv[p.w], age_norm);
    let z = tape.add(wa, pv[p.b])?;
    Ok(tape.softplus(z))
}

/// MLP `P+1 → hidden (tanh) → P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OdeFieldParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl OdeFieldParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        packed: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.add(
                "tnode.field.w1",
                fan_in_tensor(&[hidden, packed + 1], packed + 1, 1.0, rng),
            ),
            b1: store.add("tnode.field.b1", Tensor::zeros(&[hidden, 1])),
            w2: store.add(
                "tnode.field.w2",
                fan_in_tensor(&[packed, hidden], hidden, 0.1, rng),
            ),
            b2: store.add("tnode.field.b2", Tensor::zeros(&[packed, 1])),
        }
    }
}

/// `ε · f_Φ([y; t̃])` for a packed tangent column `y` (`P x 1`).
pub fn vector_field<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &OdeFieldParams,
    t_feature: T,
    y: Var,
    eps: Var,
) -> Result<Var> {
    let t = tape.constant(Tensor::column(vec![t_feature]));
    let input = tape.concat(&[y, t])?;
    let h = tape.affine(pv[p.w1], input, pv[p.b1])?;
    let h = tape.tanh(h);
    let out = tape.affine(pv[p.w2], h, pv[p.b2])?;
    tape.mul_scalar(out, eps)
}

struct TapeField<'a, T> {
    tape: &'a mut Tape<T>,
    pv: &'a ParamVars,
    p: &'a OdeFieldParams,
    eps: Var,
    scale: TimeScale,
}

impl<T: Scalar> OdeSystem<T> for TapeField<'_, T> {
    type State = Var;

    fn field(&mut self, t: T, y: &Var) -> Result<Var> {
        let tf = T::lit(self.scale.normalize(t.as_f64()));
        vector_field(self.tape, self.pv, self.p, tf, *y, self.eps)
    }

    fn axpy(&mut self, y: &Var, h: T, k: &Var) -> Result<Var> {
        let hk = self.tape.scale(*k, h);
        self.tape.add(*y, hk)
    }
}

/// Everything [`evolve`] needs besides the state and the interval.
pub struct Evolution<'a> {
    pub pv: &'a ParamVars,
    pub field: &'a OdeFieldParams,
    pub solver: &'a SolverConfig,
    pub space: Space,
    pub layout: &'a TriLayout,
    pub scale: TimeScale,
}

/// Evolves `h_prev` from `t0` to `t1` (ages in years) under rate `eps`.
pub fn evolve<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &Evolution<'_>,
    h_prev: Var,
    t0: T,
    t1: T,
    eps: Var,
) -> Result<Var> {
    if t1 < t0 {
        return Err(Error::TimeReversed {
            from: t0.as_f64(),
            to: t1.as_f64(),
        });
    }
    if t1 == t0 {
        return Ok(h_prev);
    }
    let y0 = ctx.space.vectorize(tape, h_prev, ctx.layout)?;
    let y1 = {
        let mut sys = TapeField {
            tape,
            pv: ctx.pv,
            p: ctx.field,
            eps,
            scale: ctx.scale,
        };
        ode::integrate(&mut sys, ctx.solver, t0, t1, &y0)?
    };
    let delta = tape.sub(y1, y0)?;
    let step = ctx.space.unvectorize(tape, delta, ctx.layout)?;
    ctx.space.group(tape, h_prev, step)
}
