//! CSV and text reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use crate::cv::{FoldMetrics, FoldResult};

pub const METRICS_HEADER: [&str; 14] = [
    "experiment",
    "case",
    "fold",
    "mauc",
    "precision",
    "recall",
    "f1",
    "mape_mmse",
    "mape_adas11",
    "mape_adas13",
    "r2_mmse",
    "r2_adas11",
    "r2_adas13",
    "wall_s",
];

/// One metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub experiment: String,
    pub case: String,
    pub fold: usize,
    pub metrics: FoldMetrics,
    pub wall_s: f64,
}

impl Row {
    pub fn from_fold(experiment: &str, case: &str, r: &FoldResult) -> Self {
        Self {
            experiment: experiment.into(),
            case: case.into(),
            fold: r.fold,
            metrics: r.metrics,
            wall_s: r.wall_s,
        }
    }

    /// Metric values in header order, without the wall time.
    pub fn values(&self) -> [f64; 10] {
        let m = &self.metrics;
        [
            m.mauc, m.precision, m.recall, m.f1, m.mape[0], m.mape[1], m.mape[2], m.r2[0], m.r2[1], m.r2[2],
        ]
    }
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.6}")
    }
}

/// Metrics CSV text. Wall times are written only with `timing`; otherwise
/// the column holds `NA` so repeated runs give identical bytes.
pub fn metrics_csv(rows: &[Row], timing: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let mut rec = vec![r.experiment.clone(), r.case.clone(), r.fold.to_string()];
        rec.extend(r.values().iter().map(|&v| num(v)));
        rec.push(if timing { format!("{:.3}", r.wall_s) } else { "NA".into() });
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn loss_curve_csv(curve: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.9}")])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Mean and population standard deviation over non-NaN values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups of rows sharing `(experiment, case)`, in first-seen order.
pub fn groups(rows: &[Row]) -> Vec<(String, String, Vec<&Row>)> {
    let mut out: Vec<(String, String, Vec<&Row>)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|g| g.0 == r.experiment && g.1 == r.case) {
            Some(g) => g.2.push(r),
            None => out.push((r.experiment.clone(), r.case.clone(), vec![r])),
        }
    }
    out
}

/// Mean of metric column `col` (index into [`Row::values`]) per group.
pub fn group_means(rows: &[Row], col: usize) -> Vec<(String, String, f64)> {
    groups(rows)
        .into_iter()
        .map(|(e, c, rs)| {
            let xs: Vec<f64> = rs.iter().map(|r| r.values()[col]).collect();
            (e, c, mean_std(&xs).0)
        })
        .collect()
}

/// Human-readable `mean ± std` table.
pub fn summary(rows: &[Row]) -> String {
    let mut s = String::new();
    for (exp, case, rs) in groups(rows) {
        let _ = writeln!(s, "{exp} / {case} ({} folds)", rs.len());
        for (i, name) in METRICS_HEADER[3..13].iter().enumerate() {
            let xs: Vec<f64> = rs.iter().map(|r| r.values()[i]).collect();
            let (m, sd) = mean_std(&xs);
            let _ = writeln!(s, "  {name:<12} {m:.4} ± {sd:.4}");
        }
        let wall: f64 = rs.iter().map(|r| r.wall_s).sum();
        let _ = writeln!(s, "  {:<12} {wall:.1}", "wall_s");
    }
    s
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(fold: usize, mauc: f64) -> Row {
        Row {
            experiment: "cv".into(),
            case: "full".into(),
            fold,
            metrics: FoldMetrics {
                mauc,
                precision: 0.5,
                recall: 0.5,
                f1: 0.5,
                mape: [0.1; 3],
                r2: [f64::NAN; 3],
            },
            wall_s: 1.25,
        }
    }

    #[test]
    fn header_and_na() {
        let text = metrics_csv(&[row(0, 0.9)], false).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "experiment,case,fold,mauc,precision,recall,f1,mape_mmse,mape_adas11,mape_adas13,r2_mmse,r2_adas11,r2_adas13,wall_s"
        );
        assert_eq!(
            lines.next().unwrap(),
            "cv,full,0,0.900000,0.500000,0.500000,0.500000,0.100000,0.100000,0.100000,NaN,NaN,NaN,NA"
        );
        assert!(metrics_csv(&[row(0, 0.9)], true).unwrap().contains(",1.250\n"));
    }

    #[test]
    fn means_match_rows() {
        let rows = [row(0, 0.8), row(1, 0.9)];
        let m = group_means(&rows, 0);
        assert_eq!(m.len(), 1);
        assert!((m[0].2 - 0.85).abs() < 1e-12);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
