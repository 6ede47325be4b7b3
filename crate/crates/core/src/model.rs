//! The full network: per-visit encoder, recurrent core and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::argru::{ArgruParams, CellContext, CellFlags, GateKind};
use crate::cohort::{Payload, SubjectSequence, VisitRecord, NUM_CLASSES, NUM_SCORES};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorParams, FeatureExtractor, VectorEncoderParams};
use crate::geometry::CholPoint;
use crate::objectives::{cross_entropy_on_tape, focal_on_tape, masked_sq_error_on_tape, LossConfig};
use crate::ode::SolverConfig;
use crate::params::{ParamStore, ParamVars};
use crate::rmm::{self, DecoderParams, FlatEncoderParams, LiftParams};
use crate::scalar::Scalar;
use crate::space::{Space, TriLayout};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tnode::{OdeFieldParams, TimeEncoderParams, TimeScale, ODE_HIDDEN};

/// How a visit becomes a point `E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Extractor, fusion, covariance lift and Cholesky.
    #[default]
    Rmm,
    /// Extractor and fusion, then a dense map to log-coordinates.
    Flat,
    /// Raw payload and scores through a dense map; no extractor.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub encoder: EncoderKind,
    pub space: Space,
    pub cell: CellFlags,
}

impl Ablation {
    /// Named variants accepted by [`Ablation::named`].
    pub const CASES: [&'static str; 6] = [
        "no-rmm-vector-input",
        "plain-node",
        "no-argru",
        "plain-gate",
        "full",
        "euclidean",
    ];

    pub fn named(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "full" => {}
            "no-rmm-vector-input" => a.encoder = EncoderKind::Raw,
            "plain-node" => a.cell.time_aware = false,
            "no-argru" => a.cell.gate = GateKind::None,
            "plain-gate" => {
                a.cell.gate = GateKind::PlainWfm;
                a.cell.interval_scaling = false;
            }
            "euclidean" => {
                a.encoder = EncoderKind::Flat;
                a.space = Space::Euclidean;
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown ablation case {other:?}; expected one of {}",
                    Self::CASES.join(", ")
                )))
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputKind {
    Vector { dim: usize },
    Volume { extent: usize },
}

impl InputKind {
    pub fn of(payload: &Payload) -> Self {
        match payload {
            Payload::Vector { values } => InputKind::Vector { dim: values.len() },
            Payload::Volume { extent, .. } => InputKind::Volume { extent: *extent },
        }
    }

    fn raw_len(self) -> usize {
        match self {
            InputKind::Vector { dim } => dim,
            InputKind::Volume { extent } => extent * extent * extent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the hidden Cholesky factor.
    pub q: usize,
    /// Extractor output length `O`.
    pub feature_dim: usize,
    pub ode_hidden: usize,
    pub classes: usize,
    pub scores: usize,
    pub input: InputKind,
    pub solver: SolverConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(input: InputKind) -> Self {
        Self {
            q: 8,
            feature_dim: 16,
            ode_hidden: ODE_HIDDEN,
            classes: NUM_CLASSES,
            scores: NUM_SCORES,
            input,
            solver: SolverConfig::default(),
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.q == 0 || self.feature_dim == 0 || self.ode_hidden == 0 {
            return bad("q, feature_dim and ode_hidden must be positive");
        }
        if self.classes < 2 || self.scores == 0 {
            return bad("need at least two classes and one score");
        }
        if self.input.raw_len() == 0 {
            return bad("input payload is empty");
        }
        self.solver.validate()
    }

    /// `Q(Q+1)/2`.
    pub fn packed_len(&self) -> usize {
        self.q * (self.q + 1) / 2
    }
}

/// One observed visit as model input.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitInput<T> {
    /// Age in years.
    pub time: T,
    pub payload: Tensor<T>,
    pub scores: Vec<T>,
    pub score_mask: Vec<bool>,
}

/// What the model is asked to predict for one visit.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitTarget<T> {
    pub time: T,
    pub label: Option<usize>,
    pub scores: Vec<T>,
    pub score_mask: Vec<bool>,
}

/// Input visits and, for each of them, its own label (used by the
/// auxiliary head and the one-step-ahead targets), plus the held-out visit.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub subject_id: u32,
    pub inputs: Vec<VisitInput<T>>,
    pub visit_targets: Vec<VisitTarget<T>>,
    pub target: VisitTarget<T>,
}

fn payload_tensor<T: Scalar>(p: &Payload) -> Result<Tensor<T>> {
    Tensor::from_f64(&p.shape(), p.values())
}

fn visit_target<T: Scalar>(v: &VisitRecord) -> VisitTarget<T> {
    VisitTarget {
        time: T::lit(v.age),
        label: v.label_mask.then(|| v.label.index()),
        scores: v.scores.iter().map(|&s| T::lit(s)).collect(),
        score_mask: v.score_mask.to_vec(),
    }
}

impl<T: Scalar> Sample<T> {
    /// Uses `visits[..last]` as inputs and `visits[last]` as the target.
    pub fn from_visits(subject_id: u32, visits: &[VisitRecord], last: usize) -> Result<Self> {
        if last == 0 || last >= visits.len() {
            return Err(Error::InvalidArgument {
                op: "Sample::from_visits",
                msg: format!("target index {last} with {} visits", visits.len()),
            });
        }
        let inputs = visits[..last]
            .iter()
            .map(|v| {
                Ok(VisitInput {
                    time: T::lit(v.age),
                    payload: payload_tensor(&v.payload)?,
                    scores: v.scores.iter().map(|&s| T::lit(s)).collect(),
                    score_mask: v.score_mask.to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            subject_id,
            inputs,
            visit_targets: visits[..last].iter().map(visit_target).collect(),
            target: visit_target(&visits[last]),
        })
    }

    /// Holds out the last visit.
    pub fn from_subject(s: &SubjectSequence) -> Result<Self> {
        Self::from_visits(s.subject_id, &s.visits, s.visits.len().saturating_sub(1))
    }
}

/// Which predictions are supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Supervision {
    /// Only the held-out final visit, no one-step-ahead targets.
    pub final_only: bool,
    /// Train the auxiliary classifier on every input visit.
    pub auxiliary: bool,
}

impl Default for Supervision {
    fn default() -> Self {
        Self {
            final_only: false,
            auxiliary: true,
        }
    }
}

/// Normalizers for a batch: number of supervised labels, score cells and
/// auxiliary labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossCounts {
    pub labels: usize,
    pub cells: usize,
    pub aux: usize,
}

impl std::ops::AddAssign for LossCounts {
    fn add_assign(&mut self, o: Self) {
        self.labels += o.labels;
        self.cells += o.cells;
        self.aux += o.aux;
    }
}

/// Tape nodes for one subject.
#[derive(Debug, Clone)]
pub struct SubjectForward {
    /// Decoded `h′` at input visits `1..n`: one-step-ahead predictions.
    pub ahead: Vec<(Var, Var)>,
    /// Auxiliary logits per input visit, when the extractor runs.
    pub aux_logits: Vec<Option<Var>>,
    /// Prediction at the target time.
    pub target: (Var, Var),
    pub states: Vec<Var>,
    pub last: Var,
}

/// Value-level prediction for the held-out visit.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub scale: TimeScale,
    layout: TriLayout,
    extractor: Option<FeatureExtractor>,
    lift: Option<LiftParams>,
    flat: Option<FlatEncoderParams>,
    decoder: DecoderParams,
    argru: ArgruParams,
    field: OdeFieldParams,
    time_encoder: TimeEncoderParams,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, scale: TimeScale, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = config.packed_len();
        let fused = config.feature_dim + config.scores;
        let encoder = config.ablation.encoder;
        let extractor = match (encoder, config.input) {
            (EncoderKind::Raw, _) => None,
            (_, InputKind::Vector { dim }) => Some(FeatureExtractor::Vector(VectorEncoderParams::init(
                &mut store,
                dim,
                config.feature_dim,
                config.classes,
                &mut rng,
            ))),
            (_, InputKind::Volume { extent }) => Some(FeatureExtractor::Volume(ExtractorParams::init(
                &mut store,
                extent,
                config.feature_dim,
                config.classes,
                &mut rng,
            )?)),
        };
        let (lift, flat) = match encoder {
            EncoderKind::Rmm => (Some(LiftParams::init(&mut store, config.q, &mut rng)), None),
            EncoderKind::Flat => (None, Some(FlatEncoderParams::init(&mut store, fused, p, &mut rng))),
            EncoderKind::Raw => {
                let n = config.input.raw_len() + config.scores;
                (None, Some(FlatEncoderParams::init(&mut store, n, p, &mut rng)))
            }
        };
        let time_encoder = TimeEncoderParams::init(&mut store);
        let field = OdeFieldParams::init(&mut store, p, config.ode_hidden, &mut rng);
        let argru = ArgruParams::init(&mut store, p, &mut rng);
        let decoder = DecoderParams::init(&mut store, p, config.classes, config.scores, &mut rng);
        Ok(Self {
            layout: TriLayout::new(config.q),
            config,
            store,
            scale,
            extractor,
            lift,
            flat,
            decoder,
            argru,
            field,
            time_encoder,
        })
    }

    pub fn space(&self) -> Space {
        self.config.ablation.space
    }

    pub fn layout(&self) -> &TriLayout {
        &self.layout
    }

    pub fn cell<'a>(&'a self, pv: &'a ParamVars) -> CellContext<'a> {
        CellContext {
            pv,
            argru: &self.argru,
            field: &self.field,
            time_encoder: &self.time_encoder,
            solver: &self.config.solver,
            space: self.space(),
            layout: &self.layout,
            scale: self.scale,
            flags: self.config.ablation.cell,
        }
    }

    fn check_input(&self, v: &VisitInput<T>) -> Result<()> {
        let want = match self.config.input {
            InputKind::Vector { dim } => vec![dim, 1],
            InputKind::Volume { extent } => vec![1, extent, extent, extent],
        };
        if v.payload.shape() != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "visit payload",
                left: v.payload.shape().to_vec(),
                right: want,
            });
        }
        if v.scores.len() != self.config.scores || v.score_mask.len() != self.config.scores {
            return Err(Error::DimMismatch(v.scores.len(), self.config.scores));
        }
        Ok(())
    }

    /// Encodes one visit into `(E, aux logits)`.
    pub fn encode(&self, tape: &mut Tape<T>, pv: &ParamVars, v: &VisitInput<T>) -> Result<(Var, Option<Var>)> {
        self.check_input(v)?;
        let payload = tape.constant(v.payload.clone());
        let (features, logits) = match &self.extractor {
            Some(ex) => {
                let (f, l) = ex.forward(tape, pv, payload)?;
                (f, Some(l))
            }
            None => {
                let n = v.payload.len();
                (tape.reshape(payload, &[n, 1])?, None)
            }
        };
        let m = rmm::fuse(tape, features, &v.scores, &v.score_mask)?;
        let e = match (&self.lift, &self.flat) {
            (Some(lift), _) => rmm::rmm_encode(tape, pv, lift, m)?,
            (None, Some(flat)) => rmm::flat_encode(tape, pv, flat, self.space(), &self.layout, m)?,
            (None, None) => unreachable!("model always has an encoder"),
        };
        Ok((e, logits))
    }

    pub fn decode(&self, tape: &mut Tape<T>, pv: &ParamVars, h: Var) -> Result<(Var, Var)> {
        rmm::decode(tape, pv, &self.decoder, self.space(), &self.layout, h)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        inputs: &[VisitInput<T>],
        target_time: T,
    ) -> Result<SubjectForward> {
        let first = inputs.first().ok_or(Error::Empty("visit inputs"))?;
        let mut obs = Vec::with_capacity(inputs.len());
        let mut aux_logits = Vec::with_capacity(inputs.len());
        for v in inputs {
            let (e, logits) = self.encode(tape, pv, v)?;
            obs.push((v.time, e));
            aux_logits.push(logits);
        }
        let cell = self.cell(pv);
        let (steps, last) = cell.run_sequence(tape, &obs, first.time, target_time)?;
        let mut ahead = Vec::with_capacity(steps.len().saturating_sub(1));
        for s in steps.iter().skip(1) {
            ahead.push(self.decode(tape, pv, s.evolved)?);
        }
        let target = self.decode(tape, pv, last)?;
        Ok(SubjectForward {
            ahead,
            aux_logits,
            target,
            states: steps.iter().map(|s| s.state).collect(),
            last,
        })
    }

    /// Label, cell and auxiliary counts that [`Model::objective`] sums over.
    pub fn loss_counts(&self, sample: &Sample<T>, sup: Supervision) -> LossCounts {
        let mut c = LossCounts::default();
        let mut add = |t: &VisitTarget<T>| {
            c.labels += usize::from(t.label.is_some());
            c.cells += t.score_mask.iter().filter(|&&m| m).count();
        };
        if !sup.final_only {
            sample.visit_targets.iter().skip(1).for_each(&mut add);
        }
        add(&sample.target);
        if sup.auxiliary && self.extractor.is_some() {
            c.aux = sample.visit_targets.iter().filter(|t| t.label.is_some()).count();
        }
        c
    }

    /// This subject's share of the batch loss: focal, squared-error and
    /// auxiliary sums divided by the batch-wide `norm` counts.
    pub fn objective(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        sample: &Sample<T>,
        loss: &LossConfig,
        sup: Supervision,
        norm: LossCounts,
    ) -> Result<Var> {
        let out = self.forward(tape, pv, &sample.inputs, sample.target.time)?;
        let mut pairs: Vec<(&(Var, Var), &VisitTarget<T>)> = Vec::new();
        if !sup.final_only {
            pairs.extend(out.ahead.iter().zip(sample.visit_targets.iter().skip(1)));
        }
        pairs.push((&out.target, &sample.target));

        let mut terms = Vec::new();
        let gamma = T::lit(loss.gamma);
        for ((probs, scores), t) in pairs {
            if let Some(label) = t.label {
                let alpha = *loss.alpha.get(label).ok_or(Error::InvalidLabel {
                    label,
                    classes: loss.alpha.len(),
                })?;
                let f = focal_on_tape(tape, *probs, label, T::lit(alpha), gamma)?;
                terms.push(tape.scale(f, T::one() / T::lit(norm.labels.max(1) as f64)));
            }
            let (sq, n) = masked_sq_error_on_tape(tape, *scores, &t.scores, &t.score_mask)?;
            if n > 0 {
                let w = T::lit(loss.lambda_reg / norm.cells.max(1) as f64);
                terms.push(tape.scale(sq, w));
            }
        }
        if sup.auxiliary {
            for (logits, t) in out.aux_logits.iter().zip(&sample.visit_targets) {
                if let (Some(l), Some(label)) = (logits, t.label) {
                    let c = tape.value(*l).len();
                    let row = tape.reshape(*l, &[1, c])?;
                    let probs = tape.softmax_rows(row)?;
                    let ce = cross_entropy_on_tape(tape, probs, label)?;
                    let w = T::lit(loss.lambda_ce / norm.aux.max(1) as f64);
                    terms.push(tape.scale(ce, w));
                }
            }
        }
        let mut total = tape.constant(Tensor::scalar(T::zero()));
        for t in terms {
            total = tape.add(total, t)?;
        }
        Ok(total)
    }

    /// Prediction at `target_time` with the current parameters.
    pub fn predict(&self, inputs: &[VisitInput<T>], target_time: T) -> Result<Prediction> {
        let mut tape = Tape::new();
        let pv = self.store.as_constants(&mut tape);
        let out = self.forward(&mut tape, &pv, inputs, target_time)?;
        let read = |v: Var| tape.value(v).data().iter().map(|x| x.as_f64()).collect();
        Ok(Prediction {
            probs: read(out.target.0),
            scores: read(out.target.1),
        })
    }

    /// Forecasts for input visits `1..n`, each made from the visits before
    /// it, followed by the prediction at `target_time`.
    pub fn forecasts(&self, inputs: &[VisitInput<T>], target_time: T) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let pv = self.store.as_constants(&mut tape);
        let out = self.forward(&mut tape, &pv, inputs, target_time)?;
        let read = |v: Var| -> Vec<f64> { tape.value(v).data().iter().map(|x| x.as_f64()).collect() };
        Ok(out
            .ahead
            .iter()
            .chain(std::iter::once(&out.target))
            .map(|&(p, s)| Prediction {
                probs: read(p),
                scores: read(s),
            })
            .collect())
    }

    /// Hidden points after every input visit, then the point at
    /// `target_time`.
    pub fn trajectory(&self, inputs: &[VisitInput<T>], target_time: T) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let pv = self.store.as_constants(&mut tape);
        let out = self.forward(&mut tape, &pv, inputs, target_time)?;
        let mut pts: Vec<Tensor<T>> = out.states.iter().map(|&s| tape.value(s).clone()).collect();
        pts.push(tape.value(out.last).clone());
        Ok(pts)
    }

    /// Like [`Model::trajectory`] but validated as Cholesky points; only
    /// meaningful on the manifold.
    pub fn point_trajectory(&self, inputs: &[VisitInput<T>], target_time: T) -> Result<Vec<CholPoint<T>>> {
        self.trajectory(inputs, target_time)?
            .iter()
            .map(CholPoint::from_tensor)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortConfig};

    fn cohort() -> Vec<SubjectSequence> {
        generate_cohort(&CohortConfig {
            n_subjects: 10,
            feature_dim: 5,
            seed: 2,
            ..CohortConfig::default()
        })
        .unwrap()
        .subjects
    }

    fn config() -> ModelConfig {
        let mut c = ModelConfig::new(InputKind::Vector { dim: 5 });
        c.q = 3;
        c.feature_dim = 4;
        c.ode_hidden = 8;
        c
    }

    #[test]
    fn every_case_runs() {
        let subj = &cohort()[0];
        let sample = Sample::<f64>::from_subject(subj).unwrap();
        for name in Ablation::CASES {
            let mut cfg = config();
            cfg.ablation = Ablation::named(name).unwrap();
            let m = Model::<f64>::new(cfg, TimeScale::default(), 1).unwrap();
            let p = m.predict(&sample.inputs, sample.target.time).unwrap();
            assert_eq!(p.probs.len(), 3);
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{name}");
            assert!(p.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
        assert!(Ablation::named("bogus").is_err());
    }

    #[test]
    fn manifold_trajectory_is_valid() {
        let m = Model::<f64>::new(config(), TimeScale::default(), 4).unwrap();
        for subj in cohort() {
            let s = Sample::<f64>::from_subject(&subj).unwrap();
            let pts = m.point_trajectory(&s.inputs, s.target.time).unwrap();
            assert_eq!(pts.len(), s.inputs.len() + 1);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f64>::new(config(), TimeScale::default(), 9).unwrap();
        let b = Model::<f64>::new(config(), TimeScale::default(), 9).unwrap();
        assert_eq!(a.store.tensors(), b.store.tensors());
    }

    #[test]
    fn forecasts_match_prefix_predictions() {
        let subj = &cohort()[1];
        let s = Sample::<f64>::from_subject(subj).unwrap();
        let m = Model::<f64>::new(config(), TimeScale::default(), 5).unwrap();
        let all = m.forecasts(&s.inputs, s.target.time).unwrap();
        assert_eq!(all.len(), s.inputs.len());
        for k in 1..s.inputs.len() {
            let p = m.predict(&s.inputs[..k], s.inputs[k].time).unwrap();
            assert_eq!(p, all[k - 1]);
        }
        assert_eq!(all.last().unwrap(), &m.predict(&s.inputs, s.target.time).unwrap());
    }

    #[test]
    fn wrong_payload_is_rejected() {
        let subj = &cohort()[0];
        let mut s = Sample::<f64>::from_subject(subj).unwrap();
        s.inputs[0].payload = Tensor::zeros(&[4, 1]);
        let m = Model::<f64>::new(config(), TimeScale::default(), 1).unwrap();
        assert!(m.predict(&s.inputs, s.target.time).is_err());
    }
}
