//! Subject-level cross-validation and held-out evaluation.

use std::collections::BTreeSet;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use rtnag::cohort::{subject_folds, Cohort, SubjectSequence, NUM_CLASSES, NUM_SCORES};
use rtnag::metrics::{argmax, mape, mauc, precision_recall_f1, r2};
use rtnag::model::{InputKind, Model, Prediction, Sample, Supervision, VisitTarget};
use rtnag::tnode::TimeScale;

use crate::config::ExperimentConfig;
use crate::train::{train, LossCurve, TrainOptions};

/// Held-out metrics; undefined entries are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldMetrics {
    pub mauc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mape: [f64; NUM_SCORES],
    pub r2: [f64; NUM_SCORES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub metrics: FoldMetrics,
    pub loss_curve: LossCurve,
    pub wall_s: f64,
}

fn or_nan(r: rtnag::Result<f64>) -> f64 {
    r.unwrap_or(f64::NAN)
}

/// Scores held-out predictions. With `final_only` each sample contributes
/// its last visit; otherwise every visit after the first, each forecast
/// from the visits before it.
pub fn evaluate(model: &Model<f64>, samples: &[Sample<f64>], final_only: bool) -> Result<FoldMetrics> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut pred = vec![Vec::new(); NUM_SCORES];
    let mut target = vec![Vec::new(); NUM_SCORES];
    let mut mask = vec![Vec::new(); NUM_SCORES];
    for s in samples {
        let ctx = || format!("predicting subject {}", s.subject_id);
        let (preds, targets): (Vec<Prediction>, Vec<&VisitTarget<f64>>) = if final_only {
            (vec![model.predict(&s.inputs, s.target.time).with_context(ctx)?], vec![&s.target])
        } else {
            let all = model.forecasts(&s.inputs, s.target.time).with_context(ctx)?;
            (all, s.visit_targets.iter().skip(1).chain(std::iter::once(&s.target)).collect())
        };
        for (p, t) in preds.iter().zip(targets) {
            if let Some(l) = t.label {
                probs.push(p.probs.clone());
                labels.push(l);
            }
            for r in 0..NUM_SCORES {
                pred[r].push(p.scores[r]);
                target[r].push(t.scores[r]);
                mask[r].push(t.score_mask[r]);
            }
        }
    }
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let (precision, recall, f1) = precision_recall_f1(&preds, &labels, NUM_CLASSES)?;
    let mut m = FoldMetrics {
        mauc: or_nan(mauc(&probs, &labels)),
        precision,
        recall,
        f1,
        mape: [f64::NAN; NUM_SCORES],
        r2: [f64::NAN; NUM_SCORES],
    };
    for r in 0..NUM_SCORES {
        m.mape[r] = or_nan(mape(&pred[r], &target[r], &mask[r]));
        m.r2[r] = or_nan(r2(&pred[r], &target[r], &mask[r]));
    }
    Ok(m)
}

pub fn samples(subjects: &[&SubjectSequence]) -> Result<Vec<Sample<f64>>> {
    subjects
        .iter()
        .map(|s| Sample::from_subject(s).with_context(|| format!("subject {}", s.subject_id)))
        .collect()
}

pub fn input_kind(cohort: &Cohort) -> Result<InputKind> {
    let v = cohort
        .subjects
        .first()
        .and_then(|s| s.visits.first())
        .context("cohort has no visits")?;
    Ok(InputKind::of(&v.payload))
}

pub fn class_counts(subjects: &[&SubjectSequence]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for v in subjects.iter().flat_map(|s| &s.visits) {
        if v.label_mask {
            c[v.label.index()] += 1;
        }
    }
    c
}

pub fn train_options(cfg: &ExperimentConfig, seed: u64) -> TrainOptions {
    TrainOptions {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
        supervision: Supervision {
            final_only: cfg.final_only,
            auxiliary: cfg.auxiliary,
        },
    }
}

/// Seed for fold `fold`'s initialization and shuffling.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(fold as u64 + 1)
}

/// Builds, trains and returns a model on `train_subjects`.
pub fn fit(cfg: &ExperimentConfig, input: InputKind, train_subjects: &[&SubjectSequence], seed: u64) -> Result<(Model<f64>, LossCurve)> {
    let train_samples = samples(train_subjects)?;
    let scale = TimeScale::from_ages(train_subjects.iter().flat_map(|s| s.visits.iter().map(|v| v.age)));
    let mut model = Model::new(cfg.model_config(input)?, scale, seed)?;
    let loss = cfg.loss(NUM_CLASSES).with_class_counts(&class_counts(train_subjects));
    let curve = train(&mut model, &train_samples, &loss, &train_options(cfg, seed))?;
    Ok((model, curve))
}

fn run_fold(cfg: &ExperimentConfig, cohort: &Cohort, input: InputKind, fold: usize, test_ids: &[u32]) -> Result<FoldResult> {
    let start = Instant::now();
    let test_set: BTreeSet<u32> = test_ids.iter().copied().collect();
    let (test, train_subjects): (Vec<&SubjectSequence>, Vec<&SubjectSequence>) =
        cohort.subjects.iter().partition(|s| test_set.contains(&s.subject_id));
    if train_subjects.iter().any(|s| test_set.contains(&s.subject_id)) || test.len() != test_set.len() {
        bail!("fold {fold}: subject leakage between train and test");
    }
    let (model, curve) = fit(cfg, input, &train_subjects, fold_seed(cfg.seed, fold))
        .with_context(|| format!("fold {fold}"))?;
    let metrics = evaluate(&model, &samples(&test)?, cfg.eval_final_only)?;
    Ok(FoldResult {
        fold,
        train_subjects: train_subjects.len(),
        test_subjects: test.len(),
        metrics,
        loss_curve: curve,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// K-fold cross-validation split by subject. Folds run in parallel when
/// threads are available; results come back in fold order.
pub fn crossvalidate(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    let input = input_kind(cohort)?;
    let folds = subject_folds(cohort, cfg.folds, cfg.seed)?;
    folds
        .par_iter()
        .enumerate()
        .map(|(i, ids)| run_fold(cfg, cohort, input, i, ids))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
