//! Synthetic longitudinal cohort with irregular, partly missing visits.
//!
//! Each subject follows a latent severity `s(t) = 1 / (1 + exp(-ρ(t - τ)))`
//! where `t` is years since a per-subject entry offset, so subjects join the
//! study at different disease stages. Labels threshold `s` at 1/3 and 2/3;
//! scores and payloads are noisy functions of `s`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Visit schedule in months since baseline.
pub const VISIT_GRID: [u32; 9] = [0, 6, 12, 18, 24, 36, 48, 54, 60];
pub const NUM_SCORES: usize = 3;
pub const NUM_CLASSES: usize = 3;
pub const SCORE_NAMES: [&str; NUM_SCORES] = ["mmse", "adas11", "adas13"];
pub const MIN_VISITS: usize = 3;

const AGE_CENTER: f64 = 72.5;
const AGE_SPREAD: f64 = 7.5;
const MAP_SEED_BASE: u64 = 0x5eed_0a11;
const MAP_SEED_SHIFTED: u64 = 0x5eed_0b22;
const INJECT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Diagnosis {
    Cn,
    Mci,
    Ad,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::Cn, Diagnosis::Mci, Diagnosis::Ad];

    pub fn from_severity(s: f64) -> Self {
        if s < 1.0 / 3.0 {
            Diagnosis::Cn
        } else if s < 2.0 / 3.0 {
            Diagnosis::Mci
        } else {
            Diagnosis::Ad
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::InvalidLabel {
            label: i,
            classes: NUM_CLASSES,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Payload {
    Vector { values: Vec<f64> },
    Volume { extent: usize, values: Vec<f64> },
}

impl Payload {
    pub fn values(&self) -> &[f64] {
        match self {
            Payload::Vector { values } | Payload::Volume { values, .. } => values,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Payload::Vector { values } => vec![values.len(), 1],
            Payload::Volume { extent, .. } => vec![1, *extent, *extent, *extent],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub subject_id: u32,
    pub month: u32,
    pub age: f64,
    pub payload: Payload,
    /// Normalized MMSE, ADAS-Cog 11, ADAS-Cog 13, each in `[0, 1]`.
    pub scores: [f64; NUM_SCORES],
    pub score_mask: [bool; NUM_SCORES],
    pub label: Diagnosis,
    pub label_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSequence {
    pub subject_id: u32,
    pub baseline_age: f64,
    pub visits: Vec<VisitRecord>,
}

impl SubjectSequence {
    pub fn validate(&self) -> Result<()> {
        if self.visits.len() < MIN_VISITS {
            return Err(Error::InvalidConfig(format!(
                "subject {} has {} visits, need {MIN_VISITS}",
                self.subject_id,
                self.visits.len()
            )));
        }
        for (i, w) in self.visits.windows(2).enumerate() {
            if w[1].month <= w[0].month {
                return Err(Error::NonMonotoneTimes { index: i + 1 });
            }
        }
        Ok(())
    }

    /// Keeps the visits with `month <= max_month`.
    pub fn truncated(&self, max_month: u32) -> Self {
        Self {
            visits: self.visits.iter().filter(|v| v.month <= max_month).cloned().collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<SubjectSequence>,
}

impl Cohort {
    pub fn num_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.visits.len()).sum()
    }

    /// Fraction of unobserved `(visit, score)` cells relative to full
    /// attendance on [`VISIT_GRID`].
    pub fn missing_rate(&self) -> f64 {
        let scheduled = self.subjects.len() * VISIT_GRID.len() * NUM_SCORES;
        if scheduled == 0 {
            return 0.0;
        }
        let observed: usize = self
            .subjects
            .iter()
            .flat_map(|s| &s.visits)
            .map(|v| v.score_mask.iter().filter(|&&m| m).count())
            .sum();
        1.0 - observed as f64 / scheduled as f64
    }

    pub fn label_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for v in self.subjects.iter().flat_map(|s| &s.visits) {
            if v.label_mask {
                c[v.label.index()] += 1;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub months: Vec<u32>,
    /// Probability that a non-baseline visit is absent.
    pub visit_drop: f64,
    /// Probability that a single score of an attended visit is absent.
    pub score_drop: f64,
    /// Probability that a visit's diagnosis is unknown.
    pub label_drop: f64,
    pub score_noise: f64,
    pub payload_noise: f64,
    /// Volume extent; 0 selects vector payloads.
    pub volume_extent: usize,
    /// Length of vector payloads.
    pub feature_dim: usize,
    pub rho_range: (f64, f64),
    pub onset_range: (f64, f64),
    pub entry_range: (f64, f64),
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            months: VISIT_GRID.to_vec(),
            visit_drop: 0.17,
            score_drop: 0.28,
            label_drop: 0.0,
            score_noise: 0.02,
            payload_noise: 0.1,
            volume_extent: 0,
            feature_dim: 16,
            rho_range: (0.3, 1.5),
            onset_range: (1.0, 4.0),
            entry_range: (0.0, 4.5),
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_subjects < 10 {
            return bad(format!("n_subjects must be >= 10, got {}", self.n_subjects));
        }
        for (name, p) in [
            ("visit_drop", self.visit_drop),
            ("score_drop", self.score_drop),
            ("label_drop", self.label_drop),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if self.months.len() < MIN_VISITS || self.months.first() != Some(&0) {
            return bad("visit grid must start at month 0 and hold at least 3 visits".into());
        }
        if self.months.windows(2).any(|w| w[1] <= w[0]) {
            return bad("visit grid must be strictly increasing".into());
        }
        if !(self.score_noise >= 0.0) || !(self.payload_noise >= 0.0) {
            return bad("noise levels must be >= 0".into());
        }
        if self.volume_extent == 0 && self.feature_dim == 0 {
            return bad("feature_dim must be > 0 in vector mode".into());
        }
        for (name, (lo, hi)) in [
            ("rho_range", self.rho_range),
            ("onset_range", self.onset_range),
            ("entry_range", self.entry_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("{name} must satisfy lo <= hi"));
            }
        }
        Ok(())
    }
}

/// `1 / (1 + exp(-ρ(t - τ)))`.
pub fn severity(rho: f64, onset: f64, t: f64) -> f64 {
    1.0 / (1.0 + (-rho * (t - onset)).exp())
}

fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Noise-free normalized scores for severity `s`.
pub fn score_means(s: f64) -> [f64; NUM_SCORES] {
    [1.0 - 0.6 * s, 0.1 + 0.7 * s, 0.15 + 0.7 * s]
}

pub fn normalized_age(age: f64) -> f64 {
    (age - AGE_CENTER) / AGE_SPREAD
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

struct Generator {
    cfg: CohortConfig,
    /// `feature_dim x 3` map from `[s, s², age]` to vector payloads.
    map: Vec<[f64; 3]>,
}

impl Generator {
    fn new(cfg: CohortConfig, map_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(map_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let map = (0..cfg.feature_dim)
            .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)])
            .collect();
        Self { cfg, map }
    }

    fn payload<R: Rng>(&self, rng: &mut R, s: f64, age: f64) -> Payload {
        let noise = Normal::new(0.0, self.cfg.payload_noise.max(0.0)).expect("finite std");
        if self.cfg.volume_extent == 0 {
            let x = [s, s * s, normalized_age(age)];
            let values = self
                .map
                .iter()
                .map(|a| a[0] * x[0] + a[1] * x[1] + a[2] * x[2] + noise.sample(rng))
                .collect();
            return Payload::Vector { values };
        }
        let v = self.cfg.volume_extent;
        let c = (v as f64 - 1.0) / 2.0;
        let sigma = v as f64 / 3.0;
        let core = v as f64 / 4.0;
        let mut values = Vec::with_capacity(v * v * v);
        for i in 0..v {
            for j in 0..v {
                for k in 0..v {
                    let d2 = [i, j, k].iter().map(|&x| (x as f64 - c).powi(2)).sum::<f64>();
                    let mut x = (-d2 / (2.0 * sigma * sigma)).exp();
                    if d2.sqrt() < core {
                        x *= 1.0 - 0.5 * s;
                    }
                    values.push(x + noise.sample(rng));
                }
            }
        }
        Payload::Volume { extent: v, values }
    }

    /// One subject, redrawn until at least [`MIN_VISITS`] visits survive.
    fn subject(&self, id: u32) -> SubjectSequence {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u64::from(id));
        let noise = Normal::new(0.0, cfg.score_noise.max(0.0)).expect("finite std");
        loop {
            let rho = sample_range(&mut rng, cfg.rho_range);
            let onset = sample_range(&mut rng, cfg.onset_range);
            let entry = sample_range(&mut rng, cfg.entry_range);
            let baseline_age = rng.gen_range(60.0..85.0);
            let mut visits = Vec::new();
            for &month in &cfg.months {
                let attended = month == 0 || !rng.gen_bool(cfg.visit_drop);
                // Draw everything even for dropped visits so the random
                // stream does not depend on the drop pattern.
                let age = baseline_age + f64::from(month) / 12.0;
                let s = severity(rho, onset, entry + f64::from(month) / 12.0);
                let means = score_means(s);
                let mut scores = [0.0; NUM_SCORES];
                let mut score_mask = [false; NUM_SCORES];
                for r in 0..NUM_SCORES {
                    scores[r] = clip01(means[r] + noise.sample(&mut rng));
                    score_mask[r] = !rng.gen_bool(cfg.score_drop);
                }
                let label_mask = !rng.gen_bool(cfg.label_drop);
                let payload = self.payload(&mut rng, s, age);
                if attended {
                    visits.push(VisitRecord {
                        subject_id: id,
                        month,
                        age,
                        payload,
                        scores,
                        score_mask,
                        label: Diagnosis::from_severity(s),
                        label_mask,
                    });
                }
            }
            if visits.len() >= MIN_VISITS {
                return SubjectSequence {
                    subject_id: id,
                    baseline_age,
                    visits,
                };
            }
        }
    }

    fn cohort(&self) -> Cohort {
        Cohort {
            subjects: (0..self.cfg.n_subjects as u32).map(|id| self.subject(id)).collect(),
        }
    }
}

pub fn generate_cohort(cfg: &CohortConfig) -> Result<Cohort> {
    cfg.validate()?;
    Ok(Generator::new(cfg.clone(), MAP_SEED_BASE).cohort())
}

/// Same family with faster progression, noisier scores and a different
/// payload map. Used only for evaluation.
pub fn shifted_cohort(cfg: &CohortConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut shifted = cfg.clone();
    shifted.rho_range = (0.5, 2.0);
    shifted.score_noise *= 1.5;
    Ok(Generator::new(shifted, MAP_SEED_SHIFTED).cohort())
}

/// Drops each non-baseline visit with probability `extra_rate`. A subject
/// left with fewer than three visits keeps its earliest three instead.
pub fn inject_missingness(cohort: &Cohort, extra_rate: f64, seed: u64) -> Result<Cohort> {
    if !(0.0..1.0).contains(&extra_rate) {
        return Err(Error::InvalidConfig(format!("extra_rate must be in [0, 1), got {extra_rate}")));
    }
    let subjects = cohort
        .subjects
        .iter()
        .map(|subj| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INJECT_SALT ^ u64::from(subj.subject_id));
            let kept: Vec<VisitRecord> = subj
                .visits
                .iter()
                .enumerate()
                .filter(|(i, _)| {
                    let drop = rng.gen_bool(extra_rate);
                    *i == 0 || !drop
                })
                .map(|(_, v)| v.clone())
                .collect();
            let visits = if kept.len() >= MIN_VISITS || subj.visits.len() < MIN_VISITS {
                kept
            } else {
                subj.visits[..MIN_VISITS].to_vec()
            };
            SubjectSequence {
                visits,
                ..subj.clone()
            }
        })
        .collect();
    Ok(Cohort { subjects })
}

/// Subject ids split into `folds` test sets after a seeded shuffle. The
/// last fold takes the remainder.
pub fn subject_folds(cohort: &Cohort, folds: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let n = cohort.subjects.len();
    if folds < 2 || folds > n {
        return Err(Error::InvalidConfig(format!("cannot split {n} subjects into {folds} folds")));
    }
    let mut ids: Vec<u32> = cohort.subjects.iter().map(|s| s.subject_id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let size = n / folds;
    Ok((0..folds)
        .map(|f| {
            let end = if f + 1 == folds { n } else { (f + 1) * size };
            ids[f * size..end].to_vec()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CohortConfig {
        CohortConfig {
            n_subjects: 40,
            seed: 7,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(a, b);
        for s in &a.subjects {
            s.validate().unwrap();
            assert_eq!(s.visits[0].month, 0);
            for v in &s.visits {
                assert_eq!(v.age, s.baseline_age + f64::from(v.month) / 12.0);
                assert!(v.scores.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }

    #[test]
    fn thresholds() {
        assert_eq!(Diagnosis::from_severity(0.5), Diagnosis::Mci);
        assert_eq!(Diagnosis::from_severity(0.2), Diagnosis::Cn);
        assert_eq!(Diagnosis::from_severity(0.9), Diagnosis::Ad);
    }

    #[test]
    fn zero_injection_is_identity() {
        let c = generate_cohort(&small()).unwrap();
        assert_eq!(inject_missingness(&c, 0.0, 3).unwrap(), c);
        assert!(inject_missingness(&c, 1.0, 3).is_err());
    }

    #[test]
    fn folds_partition_subjects() {
        let c = generate_cohort(&CohortConfig {
            n_subjects: 23,
            ..small()
        })
        .unwrap();
        let folds = subject_folds(&c, 5, 1).unwrap();
        assert_eq!(folds[4].len(), 7);
        let mut all: Vec<u32> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_cohort(&CohortConfig {
            n_subjects: 5,
            ..small()
        })
        .is_err());
        assert!(generate_cohort(&CohortConfig {
            visit_drop: 1.0,
            ..small()
        })
        .is_err());
    }
}
