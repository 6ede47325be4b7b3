//! Experiment configuration: a flat `key = value` file, overridable from
//! the command line.
//!
//! ```text
//! # optimizer
//! lr = 0.001
//! epochs = 100
//! batch_size = 16
//! folds = 5
//! seed = 7
//!
//! # model
//! q = 8
//! feature_dim = 16
//! ode_hidden = 64
//! solver = rk4          # or euler
//! h_max = 0.25          # years
//! case = full           # ablation case, see `Ablation::CASES`
//!
//! # loss
//! gamma = 2
//! lambda_reg = 1
//! lambda_ce = 1
//! final_only = false
//! auxiliary = true
//!
//! # evaluation
//! eval_final_only = false  # score only the held-out last visit, not every forecast
//!
//! # cohort (used when no dataset file is given)
//! n_subjects = 200
//! volume_extent = 0     # 0 = vector payloads
//! payload_dim = 16
//! visit_drop = 0.17
//! score_drop = 0.28
//! label_drop = 0
//! score_noise = 0.02
//! payload_noise = 0.1
//!
//! timing = false        # write measured wall time into metric CSVs
//! ```
//!
//! Unknown keys are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rtnag::cohort::CohortConfig;
use rtnag::model::{Ablation, InputKind, ModelConfig};
use rtnag::objectives::LossConfig;
use rtnag::ode::{Method, SolverConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub q: usize,
    pub feature_dim: usize,
    pub ode_hidden: usize,
    pub solver: SolverConfig,
    pub case: String,
    pub gamma: f64,
    pub lambda_reg: f64,
    pub lambda_ce: f64,
    pub final_only: bool,
    pub auxiliary: bool,
    pub eval_final_only: bool,
    pub cohort: CohortConfig,
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 16,
            folds: 5,
            seed: 0,
            q: 8,
            feature_dim: 16,
            ode_hidden: 64,
            solver: SolverConfig::default(),
            case: "full".into(),
            gamma: 2.0,
            lambda_reg: 1.0,
            lambda_ce: 1.0,
            final_only: false,
            auxiliary: true,
            eval_final_only: false,
            cohort: CohortConfig::default(),
            timing: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("bad value {value:?} for {key}: {e}"))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let c = &mut self.cohort;
        match key.trim() {
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "q" => self.q = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "ode_hidden" => self.ode_hidden = parse(key, v)?,
            "solver" => self.solver.method = parse::<Method>(key, v)?,
            "h_max" => self.solver.h_max = parse(key, v)?,
            "case" => {
                Ablation::named(v)?;
                self.case = v.to_string();
            }
            "gamma" => self.gamma = parse(key, v)?,
            "lambda_reg" => self.lambda_reg = parse(key, v)?,
            "lambda_ce" => self.lambda_ce = parse(key, v)?,
            "final_only" => self.final_only = parse(key, v)?,
            "auxiliary" => self.auxiliary = parse(key, v)?,
            "eval_final_only" => self.eval_final_only = parse(key, v)?,
            "timing" => self.timing = parse(key, v)?,
            "n_subjects" => c.n_subjects = parse(key, v)?,
            "volume_extent" => c.volume_extent = parse(key, v)?,
            "payload_dim" => c.feature_dim = parse(key, v)?,
            "visit_drop" => c.visit_drop = parse(key, v)?,
            "score_drop" => c.score_drop = parse(key, v)?,
            "label_drop" => c.label_drop = parse(key, v)?,
            "score_noise" => c.score_noise = parse(key, v)?,
            "payload_noise" => c.payload_noise = parse(key, v)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", i + 1))?;
            self.set(k, v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, items: &[S]) -> Result<()> {
        for item in items {
            let (k, v) = item
                .as_ref()
                .split_once('=')
                .with_context(|| format!("override {:?} is not key=value", item.as_ref()))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!("lr must be >= 0, got {}", self.lr);
        }
        if self.folds < 2 {
            bail!("folds must be >= 2, got {}", self.folds);
        }
        if self.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        self.solver.validate()?;
        self.cohort.validate()?;
        self.loss(3).validate()?;
        Ok(())
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ok(Ablation::named(&self.case)?)
    }

    pub fn model_config(&self, input: InputKind) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(input);
        m.q = self.q;
        m.feature_dim = self.feature_dim;
        m.ode_hidden = self.ode_hidden;
        m.solver = self.solver;
        m.ablation = self.ablation()?;
        Ok(m)
    }

    /// Loss settings with unit class weights; training replaces them with
    /// the fold's inverse class frequencies.
    pub fn loss(&self, classes: usize) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            lambda_reg: self.lambda_reg,
            lambda_ce: self.lambda_ce,
            ..LossConfig::new(classes)
        }
    }

    /// Cohort settings with the experiment seed.
    pub fn cohort_config(&self) -> CohortConfig {
        CohortConfig {
            seed: self.seed,
            ..self.cohort.clone()
        }
    }

    /// `key = value` lines reproducing this configuration.
    pub fn echo(&self) -> String {
        let c = &self.cohort;
        let rows: Vec<(&str, String)> = vec![
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("folds", self.folds.to_string()),
            ("seed", self.seed.to_string()),
            ("q", self.q.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("ode_hidden", self.ode_hidden.to_string()),
            ("solver", self.solver.method.to_string()),
            ("h_max", self.solver.h_max.to_string()),
            ("case", self.case.clone()),
            ("gamma", self.gamma.to_string()),
            ("lambda_reg", self.lambda_reg.to_string()),
            ("lambda_ce", self.lambda_ce.to_string()),
            ("final_only", self.final_only.to_string()),
            ("auxiliary", self.auxiliary.to_string()),
            ("eval_final_only", self.eval_final_only.to_string()),
            ("timing", self.timing.to_string()),
            ("n_subjects", c.n_subjects.to_string()),
            ("volume_extent", c.volume_extent.to_string()),
            ("payload_dim", c.feature_dim.to_string()),
            ("visit_drop", c.visit_drop.to_string()),
            ("score_drop", c.score_drop.to_string()),
            ("label_drop", c.label_drop.to_string()),
            ("score_noise", c.score_noise.to_string()),
            ("payload_noise", c.payload_noise.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
