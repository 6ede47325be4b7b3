//! Evaluation metrics. These work on plain `f64` slices and are never
//! differentiated.

use crate::error::{Error, Result};

/// Divisor guard for percentage errors.
pub const MAPE_EPS: f64 = 1e-6;

/// One-vs-rest AUC of `scores` for positives `is_pos`, as a pair count:
/// returns `(2·concordant + tied, 2·n_pos·n_neg)`.
fn auc_counts(scores: &[f64], is_pos: &[bool]) -> (u64, u64) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut neg_below = 0u64;
    let mut num = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut pos, mut neg) = (0u64, 0u64);
        for &k in &order[i..j] {
            if is_pos[k] {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        num += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    let n_pos = is_pos.iter().filter(|&&p| p).count() as u64;
    let n_neg = is_pos.len() as u64 - n_pos;
    (num, 2 * n_pos * n_neg)
}

/// Macro one-vs-rest AUC. `scores[i][c]` ranks sample `i` for class `c`.
/// Classes absent from `labels` are skipped.
pub fn mauc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch(scores.len(), labels.len()));
    }
    let classes = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|s| s.len() != classes) {
        return Err(Error::InvalidArgument {
            op: "mauc",
            msg: "ragged score rows".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label: bad, classes });
    }
    let mut present: Vec<usize> = (0..classes).filter(|c| labels.contains(c)).collect();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::UndefinedMetric("mAUC needs at least two classes".into()));
    }
    let mut total = 0.0;
    for &c in &present {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let (num, den) = auc_counts(&col, &pos);
        total += num as f64 / den as f64;
    }
    Ok(total / present.len() as f64)
}

/// Macro precision, recall and F1 over the classes present in `labels`.
pub fn precision_recall_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<(f64, f64, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::DimMismatch(preds.len(), labels.len()));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label: bad, classes });
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut sp, mut sr, mut sf, mut n) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..classes {
        let actual: usize = confusion[c].iter().sum();
        if actual == 0 {
            continue;
        }
        let tp = confusion[c][c];
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        sp += p;
        sr += r;
        sf += f;
        n += 1;
    }
    if n == 0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let n = n as f64;
    Ok((sp / n, sr / n, sf / n))
}

fn check_lengths(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<()> {
    if pred.len() != target.len() || mask.len() != pred.len() {
        return Err(Error::DimMismatch(pred.len(), target.len().max(mask.len())));
    }
    Ok(())
}

/// Mean `|p - t| / |t|` over masked cells with `|t| >= MAPE_EPS`.
pub fn mape(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    check_lengths(pred, target, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&p, &t), &m) in pred.iter().zip(target).zip(mask) {
        if m && t.abs() >= MAPE_EPS {
            sum += ((p - t) / t).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("MAPE has no usable cells".into()));
    }
    Ok(sum / n as f64)
}

/// `1 - SSE/SST` over masked cells.
pub fn r2(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    check_lengths(pred, target, mask)?;
    let cells: Vec<(f64, f64)> = pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p, t))
        .collect();
    if cells.is_empty() {
        return Err(Error::UndefinedMetric("R² has no observed cells".into()));
    }
    let mean = cells.iter().map(|c| c.1).sum::<f64>() / cells.len() as f64;
    let sse: f64 = cells.iter().map(|(p, t)| (p - t) * (p - t)).sum();
    let sst: f64 = cells.iter().map(|(_, t)| (t - mean) * (t - mean)).sum();
    if sst == 0.0 {
        return Err(Error::UndefinedMetric("R² with constant targets".into()));
    }
    Ok(1.0 - sse / sst)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
