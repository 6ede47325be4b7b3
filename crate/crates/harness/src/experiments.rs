//! Cross-validated runs over missingness, observation horizon and model
//! variants.

use anyhow::Result;
use rtnag::cohort::{inject_missingness, Cohort};
use rtnag::model::Ablation;

use crate::config::ExperimentConfig;
use crate::cv::{crossvalidate, FoldResult};
use crate::report::Row;

pub const MISSING_RATES: [f64; 4] = [0.0, 0.1, 0.3, 0.5];
pub const HORIZON_YEARS: [u32; 5] = [1, 2, 3, 4, 5];
pub const ABLATION_CASES: [&str; 6] = Ablation::CASES;

/// Metric rows plus one named loss curve per trained model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<Row>,
    pub curves: Vec<(String, Vec<f64>)>,
    /// Free-form notes such as skipped sweep points.
    pub notes: Vec<String>,
}

impl RunOutput {
    fn push(&mut self, experiment: &str, case: &str, folds: &[FoldResult]) {
        for f in folds {
            self.rows.push(Row::from_fold(experiment, case, f));
            self.curves
                .push((format!("{experiment}_{case}_fold{}", f.fold), f.loss_curve.epochs.clone()));
        }
    }
}

pub fn run_cv(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    out.push("cv", &cfg.case, &crossvalidate(cfg, cohort)?);
    Ok(out)
}

pub fn rate_label(rate: f64) -> String {
    format!("extra-{rate}")
}

/// Retrains on the cohort with each extra missing rate.
pub fn sweep_missing(cfg: &ExperimentConfig, cohort: &Cohort, rates: &[f64]) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    for &rate in rates {
        let c = inject_missingness(cohort, rate, cfg.seed)?;
        out.notes
            .push(format!("{}: {} visits, missing rate {:.3}", rate_label(rate), c.num_visits(), c.missing_rate()));
        out.push("missing", &rate_label(rate), &crossvalidate(cfg, &c)?);
    }
    Ok(out)
}

/// `true` when each value is at most `tol` above its predecessor.
pub fn non_increasing(values: &[f64], tol: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + tol)
}

/// Keeps visits in the first `years` years of each subject and drops
/// subjects with fewer than two of them. The last kept visit is the target.
pub fn horizon_cohort(cohort: &Cohort, years: u32) -> Cohort {
    Cohort {
        subjects: cohort
            .subjects
            .iter()
            .map(|s| s.truncated(years * 12))
            .filter(|s| s.visits.len() >= 2)
            .collect(),
    }
}

pub fn sweep_horizon(cfg: &ExperimentConfig, cohort: &Cohort, years: &[u32]) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    for &y in years {
        let c = horizon_cohort(cohort, y);
        let label = format!("{y}y");
        if c.subjects.len() < cfg.folds.max(2) {
            let msg = format!("{label}: {} eligible subjects, skipped", c.subjects.len());
            log::warn!("{msg}");
            out.notes.push(msg);
            continue;
        }
        out.notes.push(format!("{label}: {} eligible subjects", c.subjects.len()));
        out.push("horizon", &label, &crossvalidate(cfg, &c)?);
    }
    Ok(out)
}

/// Same folds and seeds for every case.
pub fn ablate(cfg: &ExperimentConfig, cohort: &Cohort, cases: &[&str]) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    for &case in cases {
        let mut c = cfg.clone();
        c.set("case", case)?;
        out.push("ablation", case, &crossvalidate(&c, cohort)?);
    }
    Ok(out)
}
