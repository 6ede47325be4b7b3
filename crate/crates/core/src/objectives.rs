//! Training losses, both as plain functions of values and as tape ops.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Per-class weights `α_c`.
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub lambda_reg: f64,
    pub lambda_ce: f64,
}

impl LossConfig {
    /// Unit class weights, `γ = 2`, unit combination weights.
    pub fn new(classes: usize) -> Self {
        Self {
            alpha: vec![1.0; classes],
            gamma: 2.0,
            lambda_reg: 1.0,
            lambda_ce: 1.0,
        }
    }

    /// Inverse class frequency normalized to mean one. Classes that never
    /// occur get weight one before normalization.
    pub fn with_class_counts(mut self, counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        if total == 0 || counts.is_empty() {
            return self;
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { 1.0 } else { total as f64 / c as f64 })
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        self.alpha = raw.iter().map(|a| a / mean).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        for (name, v) in [("lambda_reg", self.lambda_reg), ("lambda_ce", self.lambda_ce)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }
}

fn check_simplex<T: Scalar>(probs: &[T], label: usize) -> Result<()> {
    if label >= probs.len() {
        return Err(Error::InvalidLabel {
            label,
            classes: probs.len(),
        });
    }
    let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > SIMPLEX_TOL || probs.iter().any(|p| p.as_f64() < 0.0) {
        return Err(Error::InvalidArgument {
            op: "cross_entropy",
            msg: format!("probabilities sum to {total}"),
        });
    }
    Ok(())
}

/// `-log p_label`.
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    check_simplex(probs, label)?;
    Ok(-probs[label].max(T::lit(PROB_FLOOR)).ln())
}

/// `-α_label (1 - p_label)^γ log p_label`.
pub fn focal_loss<T: Scalar>(probs: &[T], label: usize, cfg: &LossConfig) -> Result<T> {
    check_simplex(probs, label)?;
    let alpha = *cfg.alpha.get(label).ok_or(Error::InvalidLabel {
        label,
        classes: cfg.alpha.len(),
    })?;
    let p = probs[label].max(T::lit(PROB_FLOOR));
    let modulation = if cfg.gamma == 0.0 {
        T::one()
    } else {
        (T::one() - p).powf(T::lit(cfg.gamma))
    };
    Ok(-T::lit(alpha) * modulation * p.ln())
}

/// Mean squared error over the entries where `mask` is set.
pub fn masked_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> Result<T> {
    pred.expect_same_shape(target, "masked_mse")?;
    if mask.len() != pred.len() {
        return Err(Error::DimMismatch(mask.len(), pred.len()));
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for ((&p, &t), &m) in pred.data().iter().zip(target.data()).zip(mask) {
        if m {
            sum += (p - t) * (p - t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoValidObservations);
    }
    Ok(sum / T::lit(count as f64))
}

/// One supervised prediction: class probabilities and scores for one visit.
#[derive(Debug, Clone, PartialEq)]
pub struct LossItem<T> {
    pub probs: Vec<T>,
    pub label: Option<usize>,
    pub pred_scores: Vec<T>,
    pub target_scores: Vec<T>,
    pub score_mask: Vec<bool>,
}

/// Auxiliary classifier output for one visit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxItem<T> {
    pub probs: Vec<T>,
    pub label: usize,
}

/// Mean focal over labelled items, plus `λ_reg` times the masked MSE over
/// all items, plus `λ_ce` times the mean auxiliary cross-entropy. Empty
/// terms contribute zero.
pub fn total_loss<T: Scalar>(items: &[LossItem<T>], aux: &[AuxItem<T>], cfg: &LossConfig) -> Result<T> {
    let mut focal = T::zero();
    let mut labelled = 0usize;
    let mut sq = T::zero();
    let mut cells = 0usize;
    for item in items {
        if let Some(label) = item.label {
            focal += focal_loss(&item.probs, label, cfg)?;
            labelled += 1;
        }
        if item.pred_scores.len() != item.target_scores.len() || item.score_mask.len() != item.pred_scores.len() {
            return Err(Error::DimMismatch(item.pred_scores.len(), item.target_scores.len()));
        }
        for ((&p, &t), &m) in item.pred_scores.iter().zip(&item.target_scores).zip(&item.score_mask) {
            if m {
                sq += (p - t) * (p - t);
                cells += 1;
            }
        }
    }
    let mut ce = T::zero();
    for a in aux {
        ce += cross_entropy(&a.probs, a.label)?;
    }
    let mut total = T::zero();
    if labelled > 0 {
        total += focal / T::lit(labelled as f64);
    }
    if cells > 0 {
        total += T::lit(cfg.lambda_reg) * sq / T::lit(cells as f64);
    }
    if !aux.is_empty() {
        total += T::lit(cfg.lambda_ce) * ce / T::lit(aux.len() as f64);
    }
    Ok(total)
}

fn pick<T: Scalar>(tape: &mut Tape<T>, probs: Var, label: usize) -> Result<Var> {
    let classes = tape.value(probs).len();
    if label >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    let p = tape.gather(probs, Rc::from([label]))?;
    Ok(tape.clamp_min(p, T::lit(PROB_FLOOR)))
}

/// Cross-entropy node for a probability node of any shape.
pub fn cross_entropy_on_tape<T: Scalar>(tape: &mut Tape<T>, probs: Var, label: usize) -> Result<Var> {
    let p = pick(tape, probs, label)?;
    let lp = tape.log(p)?;
    let s = tape.scale(lp, -T::one());
    Ok(tape.sum(s))
}

/// Focal loss node; `alpha` is the weight of `label`.
pub fn focal_on_tape<T: Scalar>(tape: &mut Tape<T>, probs: Var, label: usize, alpha: T, gamma: T) -> Result<Var> {
    let p = pick(tape, probs, label)?;
    let lp = tape.log(p)?;
    let weighted = if gamma == T::zero() {
        lp
    } else {
        let neg = tape.scale(p, -T::one());
        let rest = tape.add_const(neg, T::one());
        let rest = tape.clamp_min(rest, T::zero());
        let m = tape.powf(rest, gamma)?;
        tape.mul(m, lp)?
    };
    let s = tape.scale(weighted, -alpha);
    Ok(tape.sum(s))
}

/// Sum of squared errors over masked entries, as a scalar node, together
/// with the number of entries used.
pub fn masked_sq_error_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &[T],
    mask: &[bool],
) -> Result<(Var, usize)> {
    let n = tape.value(pred).len();
    if target.len() != n || mask.len() != n {
        return Err(Error::DimMismatch(target.len().max(mask.len()), n));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Ok((tape.constant(Tensor::scalar(T::zero())), 0));
    }
    let picked = tape.gather(pred, Rc::from(idx.clone()))?;
    let t = tape.constant(Tensor::column(idx.iter().map(|&i| target[i]).collect()));
    let d = tape.sub(picked, t)?;
    let sq = tape.mul(d, d)?;
    Ok((tape.sum(sq), idx.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let u = [1.0 / 3.0; 3];
        assert!((cross_entropy(&u, 0).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&u, 3), Err(Error::InvalidLabel { .. })));
        assert!(cross_entropy(&[0.5, 0.6], 0).is_err());
    }

    #[test]
    fn focal_examples() {
        let cfg = LossConfig::new(2);
        let v = focal_loss(&[0.5, 0.5], 0, &cfg).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        let mut plain = cfg.clone();
        plain.gamma = 0.0;
        let p = [0.3f64, 0.7];
        assert!((focal_loss(&p, 1, &plain).unwrap() - cross_entropy(&p, 1).unwrap()).abs() < 1e-15);
        let near = [0.01, 0.99];
        assert!(focal_loss(&near, 1, &cfg).unwrap() < 1e-3 * cross_entropy(&near, 1).unwrap());
    }

    #[test]
    fn masked_mse_examples() {
        let pred = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let target = pred.map(|x| x + 0.1);
        let mask = [true, false, true, true, false, true];
        assert!((masked_mse(&pred, &target, &mask).unwrap() - 0.01).abs() < 1e-12);
        assert!(matches!(
            masked_mse(&pred, &target, &[false; 6]),
            Err(Error::NoValidObservations)
        ));
    }

    #[test]
    fn class_weights_have_unit_mean() {
        let cfg = LossConfig::new(3).with_class_counts(&[10, 30, 60]);
        let mean: f64 = cfg.alpha.iter().sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(cfg.alpha[0] > cfg.alpha[1] && cfg.alpha[1] > cfg.alpha[2]);
    }

    #[test]
    fn total_loss_by_hand() {
        let cfg = LossConfig::new(3);
        let items = vec![
            LossItem {
                probs: vec![0.2, 0.5, 0.3],
                label: Some(1),
                pred_scores: vec![0.5, 0.4, 0.3],
                target_scores: vec![0.6, 0.4, 0.0],
                score_mask: vec![true, true, false],
            },
            LossItem {
                probs: vec![0.1, 0.1, 0.8],
                label: None,
                pred_scores: vec![0.2, 0.2, 0.2],
                target_scores: vec![0.0, 0.5, 0.2],
                score_mask: vec![true, false, true],
            },
        ];
        let aux = vec![AuxItem {
            probs: vec![0.25, 0.25, 0.5],
            label: 2,
        }];
        let got = total_loss(&items, &aux, &cfg).unwrap();
        let focal = -0.25 * 0.5f64.ln();
        let mse = (0.01 + 0.0 + 0.04 + 0.0) / 4.0;
        let ce = -(0.5f64.ln());
        assert!((got - (focal + mse + ce)).abs() < 1e-12);

        let mut off = cfg.clone();
        off.lambda_reg = 0.0;
        off.lambda_ce = 0.0;
        assert!((total_loss(&items, &aux, &off).unwrap() - focal).abs() < 1e-12);
    }

    #[test]
    fn tape_losses_match_values() {
        let probs = [0.2, 0.7, 0.1];
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(&[1, 3], &probs).unwrap());
        let f = focal_on_tape(&mut tape, p, 1, 1.3, 2.0).unwrap();
        let mut cfg = LossConfig::new(3);
        cfg.alpha[1] = 1.3;
        assert!((tape.scalar_value(f) - focal_loss(&probs, 1, &cfg).unwrap()).abs() < 1e-15);
        let c = cross_entropy_on_tape(&mut tape, p, 0).unwrap();
        assert!((tape.scalar_value(c) - cross_entropy(&probs, 0).unwrap()).abs() < 1e-15);
        let pred = tape.constant(Tensor::column(vec![0.1, 0.5, 0.9]));
        let (s, n) = masked_sq_error_on_tape(&mut tape, pred, &[0.0, 0.0, 1.0], &[true, false, true]).unwrap();
        assert_eq!(n, 2);
        assert!((tape.scalar_value(s) - 0.02).abs() < 1e-15);
    }
}
