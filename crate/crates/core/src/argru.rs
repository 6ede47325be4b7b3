//! Attention-gated recurrent update on Cholesky space, alternated with the
//! time-aware ODE between observations.
//!
//! At every visit the hidden point is first evolved to the visit time
//! (`h′`), then blended with a candidate built from the encoded observation
//! `e`:
//!
//! ```text
//! q, k, v = exp(W·log(h′)), exp(W·log(e)), exp(W·log(e))
//! z       = sigmoid(lower(softmax(q kᵀ / √Q) · v)) · exp(-softplus(θ)·Δt)
//! r       = sigmoid(wfm({e, h′}) ⊕ B_r)
//! l       = wfm({e, r ⊕ h′}) ⊕ B_l
//! h̄       = tanh(strict(l)) + softplus(diag(l))
//! h       = (1 - z) ⊙ h′ + z ⊙ h̄
//! ```
//!
//! `z` is kept within `[GATE_FLOOR, 1 - GATE_FLOOR]`. Every entry of `z` lies in `(0, 1)`,
//! so `h` keeps a positive diagonal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::SolverConfig;
use crate::params::{normal_tensor, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::space::{Space, TriLayout};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, UnaryKind};
use crate::tnode::{self, Evolution, OdeFieldParams, TimeEncoderParams, TimeScale};

pub const GATE_FLOOR: f64 = 1e-6;
pub const WEIGHT_INIT_STD: f64 = 0.01;
/// Initial pre-softplus interval rate; softplus(-2) ≈ 0.127 per year.
pub const THETA_INIT: f64 = -2.0;

/// Which update gate the cell uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    #[default]
    Attention,
    /// `z = sigmoid(wfm({e, h′}) ⊕ B_z)`, no attention.
    PlainWfm,
    /// No observation update at all: `h = h′`.
    None,
}

/// Switches for the recurrent part of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellFlags {
    pub gate: GateKind,
    pub interval_scaling: bool,
    /// `false` fixes `ε = 1` and bypasses the time encoder.
    pub time_aware: bool,
    /// `false` replaces the ODE with the identity map.
    pub tnode: bool,
}

impl Default for CellFlags {
    fn default() -> Self {
        Self {
            gate: GateKind::Attention,
            interval_scaling: true,
            time_aware: true,
            tnode: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArgruParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wr_logits: ParamId,
    pub wl_logits: ParamId,
    /// Log-coordinates of `B_r`, `P x 1`.
    pub br: ParamId,
    /// Log-coordinates of `B_l`, `P x 1`.
    pub bl: ParamId,
    /// Pre-softplus interval rate.
    pub theta: ParamId,
    pub wz_logits: ParamId,
    pub bz: ParamId,
}

impl ArgruParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, packed: usize, rng: &mut R) -> Self {
        let p = packed;
        Self {
            wq: store.add("argru.wq", normal_tensor(&[p, p], WEIGHT_INIT_STD, rng)),
            wk: store.add("argru.wk", normal_tensor(&[p, p], WEIGHT_INIT_STD, rng)),
            wv: store.add("argru.wv", normal_tensor(&[p, p], WEIGHT_INIT_STD, rng)),
            wr_logits: store.add("argru.wr", Tensor::zeros(&[1, 2])),
            wl_logits: store.add("argru.wl", Tensor::zeros(&[1, 2])),
            br: store.add("argru.br", Tensor::zeros(&[p, 1])),
            bl: store.add("argru.bl", Tensor::zeros(&[p, 1])),
            theta: store.add("argru.theta", Tensor::scalar(T::lit(THETA_INIT))),
            wz_logits: store.add("argru.wz", Tensor::zeros(&[1, 2])),
            bz: store.add("argru.bz", Tensor::zeros(&[p, 1])),
        }
    }
}

/// Parameters and configuration shared by every step of a sequence.
pub struct CellContext<'a> {
    pub pv: &'a ParamVars,
    pub argru: &'a ArgruParams,
    pub field: &'a OdeFieldParams,
    pub time_encoder: &'a TimeEncoderParams,
    pub solver: &'a SolverConfig,
    pub space: Space,
    pub layout: &'a TriLayout,
    pub scale: TimeScale,
    pub flags: CellFlags,
}

impl CellContext<'_> {
    fn evolution(&self) -> Evolution<'_> {
        Evolution {
            pv: self.pv,
            field: self.field,
            solver: self.solver,
            space: self.space,
            layout: self.layout,
            scale: self.scale,
        }
    }

    fn map_point<T: Scalar>(&self, tape: &mut Tape<T>, w: ParamId, x: Var) -> Result<Var> {
        let v = self.space.vectorize(tape, x, self.layout)?;
        let mapped = tape.matmul(self.pv[w], v)?;
        self.space.unvectorize(tape, mapped, self.layout)
    }

    fn bias_point<T: Scalar>(&self, tape: &mut Tape<T>, b: ParamId) -> Result<Var> {
        self.space.unvectorize(tape, self.pv[b], self.layout)
    }

    /// `ε` for an interval starting at normalized age `age_norm`.
    pub fn epsilon<T: Scalar>(&self, tape: &mut Tape<T>, age_norm: T) -> Result<Var> {
        if self.flags.time_aware {
            tnode::time_coefficient(tape, self.pv, self.time_encoder, age_norm)
        } else {
            Ok(tape.constant(Tensor::scalar(T::one())))
        }
    }

    /// TNODE step, or the identity when disabled.
    pub fn evolve<T: Scalar>(&self, tape: &mut Tape<T>, h: Var, t0: T, t1: T, age_norm: T) -> Result<Var> {
        if t1 < t0 {
            return Err(Error::TimeReversed {
                from: t0.as_f64(),
                to: t1.as_f64(),
            });
        }
        if !self.flags.tnode {
            return Ok(h);
        }
        let eps = self.epsilon(tape, age_norm)?;
        tnode::evolve(tape, &self.evolution(), h, t0, t1, eps)
    }

    pub fn qkv<T: Scalar>(&self, tape: &mut Tape<T>, h_evolved: Var, e: Var) -> Result<(Var, Var, Var)> {
        let dims = (tape.shape(h_evolved).to_vec(), tape.shape(e).to_vec());
        if dims.0 != dims.1 {
            return Err(Error::ShapeMismatch {
                op: "qkv",
                left: dims.0,
                right: dims.1,
            });
        }
        let q = self.map_point(tape, self.argru.wq, h_evolved)?;
        let k = self.map_point(tape, self.argru.wk, e)?;
        let v = self.map_point(tape, self.argru.wv, e)?;
        Ok((q, k, v))
    }

    fn interval_decay<T: Scalar>(&self, tape: &mut Tape<T>, z: Var, dt: T) -> Result<Var> {
        if !self.flags.interval_scaling {
            return Ok(z);
        }
        let rate = tape.softplus(self.pv[self.argru.theta]);
        let arg = tape.scale(rate, -dt);
        let decay = tape.exp(arg);
        tape.mul_scalar(z, decay)
    }

    fn finish_gate<T: Scalar>(&self, tape: &mut Tape<T>, raw: Var, dt: T) -> Result<Var> {
        let z = tape.tri_map(raw, Some(UnaryKind::Sigmoid), Some(UnaryKind::Sigmoid))?;
        let z = self.interval_decay(tape, z, dt)?;
        // keep z inside [floor, 1 - floor]; a sigmoid that rounds to 1 would
        // otherwise zero the `(1 - z)·h′` share of the diagonal
        let floor = T::lit(GATE_FLOOR);
        let z = tape.clamp_min(z, floor);
        let neg = tape.scale(z, -T::one());
        let rest = tape.add_const(neg, T::one());
        let rest = tape.clamp_min(rest, floor);
        let neg = tape.scale(rest, -T::one());
        let z = tape.add_const(neg, T::one());
        tape.lower_mask(z)
    }

    /// Update gate from attention scores over the value point.
    pub fn attention_gate<T: Scalar>(&self, tape: &mut Tape<T>, q: Var, k: Var, v: Var, dt: T) -> Result<Var> {
        if dt < T::zero() {
            return Err(Error::TimeReversed {
                from: 0.0,
                to: dt.as_f64(),
            });
        }
        let dim = tape.shape(q)[0];
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::one() / T::lit(dim as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(attn, v)?;
        let raw = tape.lower_mask(mixed)?;
        self.finish_gate(tape, raw, dt)
    }

    /// Update gate without attention: `sigmoid(wfm({e, h′}) ⊕ B_z)`.
    pub fn plain_gate<T: Scalar>(&self, tape: &mut Tape<T>, e: Var, h_evolved: Var, dt: T) -> Result<Var> {
        let m = self.space.wfm2(tape, e, h_evolved, self.pv[self.argru.wz_logits])?;
        let b = self.bias_point(tape, self.argru.bz)?;
        let raw = self.space.group(tape, m, b)?;
        self.finish_gate(tape, raw, dt)
    }

    pub fn reset_gate<T: Scalar>(&self, tape: &mut Tape<T>, e: Var, h_evolved: Var) -> Result<Var> {
        let m = self.space.wfm2(tape, e, h_evolved, self.pv[self.argru.wr_logits])?;
        let b = self.bias_point(tape, self.argru.br)?;
        let arg = self.space.group(tape, m, b)?;
        tape.tri_map(arg, Some(UnaryKind::Sigmoid), Some(UnaryKind::Sigmoid))
    }

    pub fn candidate<T: Scalar>(&self, tape: &mut Tape<T>, e: Var, r: Var, h_evolved: Var) -> Result<Var> {
        let rh = self.space.group(tape, r, h_evolved)?;
        let m = self.space.wfm2(tape, e, rh, self.pv[self.argru.wl_logits])?;
        let b = self.bias_point(tape, self.argru.bl)?;
        let l = self.space.group(tape, m, b)?;
        let diag = match self.space {
            Space::Manifold => UnaryKind::Softplus,
            Space::Euclidean => UnaryKind::Tanh,
        };
        tape.tri_map(l, Some(UnaryKind::Tanh), Some(diag))
    }

    /// One observation: evolve from `t_prev` to `t_cur`, then gate in `e`.
    /// `age_norm` is the normalized age at the start of the interval.
    pub fn cell_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        h_prev: Var,
        e: Var,
        t_prev: T,
        t_cur: T,
        age_norm: T,
    ) -> Result<Var> {
        Ok(self.traced_step(tape, h_prev, e, t_prev, t_cur, age_norm)?.state)
    }

    /// [`CellContext::cell_step`] that also returns the evolved point.
    pub fn traced_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        h_prev: Var,
        e: Var,
        t_prev: T,
        t_cur: T,
        age_norm: T,
    ) -> Result<Step> {
        let evolved = self.evolve(tape, h_prev, t_prev, t_cur, age_norm)?;
        let dt = t_cur - t_prev;
        let z = match self.flags.gate {
            GateKind::None => return Ok(Step { evolved, state: evolved }),
            GateKind::Attention => {
                let (q, k, v) = self.qkv(tape, evolved, e)?;
                self.attention_gate(tape, q, k, v, dt)?
            }
            GateKind::PlainWfm => self.plain_gate(tape, e, evolved, dt)?,
        };
        let r = self.reset_gate(tape, e, evolved)?;
        let cand = self.candidate(tape, e, r, evolved)?;
        let state = update(tape, evolved, cand, z)?;
        Ok(Step { evolved, state })
    }

    /// Runs the cell over time-ordered observations starting from the
    /// group identity at `start_time`, then evolves (without a gate) to
    /// `target_time`. Returns every step and the final point.
    pub fn run_sequence<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        observations: &[(T, Var)],
        start_time: T,
        target_time: T,
    ) -> Result<(Vec<Step>, Var)> {
        let dim = self.layout.dim;
        let mut h = tape.constant(self.space.origin(dim));
        let mut t_prev = start_time;
        let mut steps = Vec::with_capacity(observations.len());
        for (i, &(t, e)) in observations.iter().enumerate() {
            if t < t_prev || (i > 0 && t == t_prev) {
                return Err(Error::NonMonotoneTimes { index: i });
            }
            let age_norm = T::lit(self.scale.normalize(t_prev.as_f64()));
            let step = self.traced_step(tape, h, e, t_prev, t, age_norm)?;
            h = step.state;
            steps.push(step);
            t_prev = t;
        }
        if target_time < t_prev {
            return Err(Error::TimeReversed {
                from: t_prev.as_f64(),
                to: target_time.as_f64(),
            });
        }
        let age_norm = T::lit(self.scale.normalize(t_prev.as_f64()));
        let last = self.evolve(tape, h, t_prev, target_time, age_norm)?;
        Ok((steps, last))
    }
}

/// Points produced by one cell step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    /// `h′`: the previous state carried to the observation time.
    pub evolved: Var,
    /// `h` after the gated update.
    pub state: Var,
}

/// `h′ + z ⊙ (h̄ - h′)`.
pub fn update<T: Scalar>(tape: &mut Tape<T>, h_evolved: Var, candidate: Var, z: Var) -> Result<Var> {
    let diff = tape.sub(candidate, h_evolved)?;
    let step = tape.mul(z, diff)?;
    tape.add(h_evolved, step)
}
