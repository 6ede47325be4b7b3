//! Finite-difference check of the complete training objective.

use anyhow::Result;
use rtnag::cohort::{generate_cohort, CohortConfig, NUM_CLASSES};
use rtnag::gradcheck::{gradient_check_report, GradCheckReport, DEFAULT_STEP};
use rtnag::model::{InputKind, LossCounts, Model, ModelConfig, Sample, Supervision};
use rtnag::objectives::LossConfig;
use rtnag::params::ParamVars;
use rtnag::tape::{Tape, Var};
use rtnag::tnode::TimeScale;

pub const MODEL_TOL: f64 = 1e-4;

/// Two subjects with three visits each (two inputs and a held-out visit),
/// `Q = 4`, vector payloads, every loss term switched on.
pub fn model_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let cohort = generate_cohort(&CohortConfig {
        n_subjects: 10,
        feature_dim: 5,
        score_drop: 0.2,
        seed,
        ..CohortConfig::default()
    })?;
    let samples: Vec<Sample<f64>> = cohort.subjects[..2]
        .iter()
        .map(|s| Sample::from_visits(s.subject_id, &s.visits[..3], 2))
        .collect::<rtnag::Result<_>>()?;
    let ages = cohort.subjects[..2].iter().flat_map(|s| s.visits.iter().map(|v| v.age));
    let mut cfg = ModelConfig::new(InputKind::Vector { dim: 5 });
    cfg.q = 4;
    cfg.feature_dim = 6;
    cfg.ode_hidden = 8;
    let mut model = Model::<f64>::new(cfg, TimeScale::from_ages(ages), seed)?;
    // Nudge the zero-initialized parameters so every path carries gradient.
    for t in model.store.tensors_mut() {
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += 0.05 * ((i as f64 * 0.7).sin());
        }
    }
    let loss = LossConfig::new(NUM_CLASSES).with_class_counts(&[3, 2, 1]);
    let sup = Supervision::default();
    let mut norm = LossCounts::default();
    for s in &samples {
        norm += model.loss_counts(s, sup);
    }
    let params = model.store.tensors().to_vec();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let pv = ParamVars::from_vars(vars.to_vec());
        let mut total: Option<Var> = None;
        for s in &samples {
            let o = model.objective(tape, &pv, s, &loss, sup, norm)?;
            total = Some(match total {
                Some(t) => tape.add(t, o)?,
                None => o,
            });
        }
        Ok(total.expect("two samples"))
    };
    Ok(gradient_check_report(f, &params, DEFAULT_STEP)?)
}
