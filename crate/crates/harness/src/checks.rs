//! Randomized invariant checks with independent oracles. Each function
//! returns what it measured; callers decide what passes.

use anyhow::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rtnag::argru::{ArgruParams, CellContext, CellFlags};
use rtnag::geometry::{chol_exp, chol_log, group_op, wfm, CholPoint, TangentVec};
use rtnag::metrics::mauc;
use rtnag::objectives::{cross_entropy, focal_loss, masked_mse, LossConfig};
use rtnag::ode::{integrate, integrate_steps, FnSystem, Method, SolverConfig};
use rtnag::params::{ParamStore, ParamVars};
use rtnag::space::{Space, TriLayout};
use rtnag::tnode::{OdeFieldParams, TimeEncoderParams, TimeScale};
use rtnag::{Tape, Tensor};

fn random_point<R: Rng>(rng: &mut R, dim: usize, log_spread: f64) -> CholPoint<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut t = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        for j in 0..i {
            t.set(i, j, 2.0 * n.sample(rng));
        }
        t.set(i, i, rng.gen_range(-log_spread..log_spread).exp());
    }
    CholPoint::from_tensor(&t).expect("positive diagonal by construction")
}

/// Largest relative difference, scaled by `max(1, |b|)`.
fn max_scaled_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryReport {
    pub cases: usize,
    /// `exp(log(L))` against `L` and `log(exp(X))` against `X`.
    pub exp_log: f64,
    /// Cases where `L ⊕ I` differed from `L` in any bit.
    pub identity_failures: usize,
    /// Cases where `A ⊕ B` and `B ⊕ A` differed in any bit.
    pub commutativity_failures: usize,
    pub associativity: f64,
    /// Closed-form mean against `exp(Σ wᵢ log(Lᵢ))`.
    pub wfm: f64,
}

pub fn geometry(seed: u64, cases: usize) -> Result<GeometryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = GeometryReport {
        cases,
        exp_log: 0.0,
        identity_failures: 0,
        commutativity_failures: 0,
        associativity: 0.0,
        wfm: 0.0,
    };
    for _ in 0..cases {
        let dim = rng.gen_range(1..=6);
        let a = random_point(&mut rng, dim, 2.0);
        let b = random_point(&mut rng, dim, 2.0);
        let c = random_point(&mut rng, dim, 2.0);

        let back = chol_exp(&chol_log(&a)?);
        r.exp_log = r.exp_log.max(max_scaled_diff(back.packed(), a.packed()));
        let x = TangentVec::from_packed((0..a.packed().len()).map(|_| rng.gen_range(-3.0..3.0)).collect())?;
        let x_back = chol_log(&chol_exp(&x))?;
        r.exp_log = r.exp_log.max(max_scaled_diff(x_back.packed(), x.packed()));

        if group_op(&a, &CholPoint::identity(dim))? != a {
            r.identity_failures += 1;
        }
        if group_op(&a, &b)? != group_op(&b, &a)? {
            r.commutativity_failures += 1;
        }
        let left = group_op(&group_op(&a, &b)?, &c)?;
        let right = group_op(&a, &group_op(&b, &c)?)?;
        r.associativity = r.associativity.max(max_scaled_diff(left.packed(), right.packed()));

        let k = rng.gen_range(1..=5);
        let pts: Vec<CholPoint<f64>> = (0..k).map(|_| random_point(&mut rng, dim, 2.0)).collect();
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let got = wfm(&pts, &logits)?;
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut acc = vec![0.0; got.packed().len()];
        for (p, w) in pts.iter().zip(&e) {
            for (s, v) in acc.iter_mut().zip(chol_log(p)?.packed()) {
                *s += w / z * v;
            }
        }
        let oracle = chol_exp(&TangentVec::from_packed(acc)?);
        r.wfm = r.wfm.max(max_scaled_diff(got.packed(), oracle.packed()));
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosureReport {
    pub cell_steps: usize,
    pub cell_failures: usize,
    pub evolutions: usize,
    pub evolve_failures: usize,
    /// Smallest diagonal entry seen in any output.
    pub min_diagonal: f64,
}

/// Random recurrent parameters, larger than the training initialization so
/// the gates and the vector field are far from their quiet regime.
struct RandomCell {
    store: ParamStore<f64>,
    argru: ArgruParams,
    field: OdeFieldParams,
    time: TimeEncoderParams,
    layout: TriLayout,
}

impl RandomCell {
    fn new<R: Rng>(rng: &mut R, q: usize) -> Self {
        let layout = TriLayout::new(q);
        let p = layout.packed_len();
        let mut store = ParamStore::new();
        let time = TimeEncoderParams::init(&mut store);
        let field = OdeFieldParams::init(&mut store, p, 16, rng);
        let argru = ArgruParams::init(&mut store, p, rng);
        let n = Normal::new(0.0, 1.0).unwrap();
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = n.sample(rng);
            }
        }
        Self {
            store,
            argru,
            field,
            time,
            layout,
        }
    }

    fn context<'a>(&'a self, pv: &'a ParamVars, solver: &'a SolverConfig, flags: CellFlags) -> CellContext<'a> {
        CellContext {
            pv,
            argru: &self.argru,
            field: &self.field,
            time_encoder: &self.time,
            solver,
            space: Space::Manifold,
            layout: &self.layout,
            scale: TimeScale { mean: 72.0, std: 7.0 },
            flags,
        }
    }
}

/// Valid point, or `None` when the output breaks the manifold contract.
fn check_point(t: &Tensor<f64>) -> Option<f64> {
    CholPoint::from_tensor(t).ok().map(|p| p.min_diagonal())
}

pub fn closure(seed: u64, cell_steps: usize, evolutions: usize) -> Result<ClosureReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let solver = SolverConfig::default();
    let mut r = ClosureReport {
        cell_steps,
        cell_failures: 0,
        evolutions,
        evolve_failures: 0,
        min_diagonal: f64::INFINITY,
    };
    let mut cell = RandomCell::new(&mut rng, 3);
    for i in 0..cell_steps.max(evolutions) {
        if i % 100 == 0 {
            let q = rng.gen_range(1..=4);
            cell = RandomCell::new(&mut rng, q);
        }
        let dim = cell.layout.dim;
        let h = random_point(&mut rng, dim, 3.0);
        let e = random_point(&mut rng, dim, 3.0);
        let t0 = rng.gen_range(55.0..90.0);
        let t1 = t0 + rng.gen_range(0.0..3.0);
        let mut tape = Tape::new();
        let pv = cell.store.as_constants(&mut tape);
        let hv = tape.constant(h.to_tensor());
        let ev = tape.constant(e.to_tensor());
        let age = (t0 - 72.0) / 7.0;
        if i < cell_steps {
            let ctx = cell.context(&pv, &solver, CellFlags::default());
            let out = ctx.cell_step(&mut tape, hv, ev, t0, t1, age)?;
            match check_point(tape.value(out)) {
                Some(m) => r.min_diagonal = r.min_diagonal.min(m),
                None => r.cell_failures += 1,
            }
        }
        if i < evolutions {
            let ctx = cell.context(&pv, &solver, CellFlags::default());
            let out = ctx.evolve(&mut tape, hv, t0, t1, age)?;
            match check_point(tape.value(out)) {
                Some(m) => r.min_diagonal = r.min_diagonal.min(m),
                None => r.evolve_failures += 1,
            }
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverReport {
    pub rk4_slope: f64,
    pub euler_slope: f64,
    /// `dy/dt = 0` returns the initial state bit-for-bit.
    pub zero_dynamics_exact: bool,
    /// `t1 == t0` returns the initial state bit-for-bit.
    pub zero_interval_exact: bool,
}

/// Least-squares slope of `log(err)` against `log(h)`.
fn loglog_slope(hs: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Convergence order on `dy/dt = sin(t)·y`, whose solution from `y(0) = 1`
/// is `exp(1 - cos t)`.
pub fn solver_order() -> Result<SolverReport> {
    let t1 = 2.0;
    let exact = (1.0 - f64::cos(t1)).exp();
    let slope = |method: Method, ns: &[usize]| -> Result<f64> {
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for &n in ns {
            let mut sys = FnSystem {
                f: |t: f64, y: &[f64]| vec![t.sin() * y[0]],
            };
            let y = integrate_steps(&mut sys, method, 0.0, t1, n, &vec![1.0])?;
            hs.push(t1 / n as f64);
            errs.push((y[0] - exact).abs());
        }
        ensure!(errs.iter().all(|e| *e > 0.0), "{method} error vanished; slope undefined");
        Ok(loglog_slope(&hs, &errs))
    };
    let y0 = vec![0.3, -1.7, 2.5];
    let cfg = SolverConfig::default();
    let mut zero = FnSystem {
        f: |_t: f64, y: &[f64]| vec![0.0; y.len()],
    };
    let mut any = FnSystem {
        f: |t: f64, y: &[f64]| y.iter().map(|v| v * t.cos()).collect(),
    };
    let zero_dynamics_exact = [Method::Euler, Method::Rk4].iter().all(|&m| {
        integrate(&mut zero, &SolverConfig { method: m, ..cfg }, 0.0, 3.3, &y0).ok() == Some(y0.clone())
    });
    let zero_interval_exact = integrate(&mut any, &cfg, 1.5, 1.5, &y0)? == y0;
    Ok(SolverReport {
        rk4_slope: slope(Method::Rk4, &[8, 16, 32, 64])?,
        euler_slope: slope(Method::Euler, &[64, 128, 256, 512, 1024])?,
        zero_dynamics_exact,
        zero_interval_exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    /// Largest `|focal(γ=0, α=1) - CE|`.
    pub focal_vs_ce: f64,
    pub focal_cases: usize,
    /// Instances where the library mAUC differs from the pairwise count.
    pub mauc_mismatches: usize,
    pub mauc_cases: usize,
    /// Perturbations of masked-out entries that changed the masked MSE.
    pub mask_changes: usize,
    pub mask_cases: usize,
}

/// O(n²) one-vs-rest AUC: each (positive, negative) pair scores 1 when the
/// positive ranks higher, 1/2 on a tie; classes without both sides are
/// skipped.
pub fn mauc_pairwise(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes = scores.first().map_or(0, Vec::len);
    let mut aucs = Vec::new();
    for c in 0..classes {
        let pos: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| **l == c).map(|(_, s)| s[c]).collect();
        let neg: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| **l != c).map(|(_, s)| s[c]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut total = 0.0;
        for p in &pos {
            for n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        aucs.push(total / (pos.len() * neg.len()) as f64);
    }
    aucs.iter().sum::<f64>() / aucs.len() as f64
}

fn simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.gen_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

pub fn loss_metric_oracles(seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = OracleReport {
        focal_vs_ce: 0.0,
        focal_cases: 1000,
        mauc_mismatches: 0,
        mauc_cases: 50,
        mask_changes: 0,
        mask_cases: 200,
    };
    let plain = LossConfig {
        gamma: 0.0,
        ..LossConfig::new(3)
    };
    for _ in 0..r.focal_cases {
        let p = simplex(&mut rng, 3);
        let label = rng.gen_range(0..3);
        let d = (focal_loss(&p, label, &plain)? - cross_entropy(&p, label)?).abs();
        r.focal_vs_ce = r.focal_vs_ce.max(d);
    }
    for _ in 0..r.mauc_cases {
        let n = rng.gen_range(6..60);
        // a coarse grid makes ties common
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| simplex(&mut rng, 3).iter().map(|v| (v * 8.0).round() / 8.0).collect())
            .collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        labels[0] = 0;
        labels[1] = 1;
        if mauc(&scores, &labels)? != mauc_pairwise(&scores, &labels) {
            r.mauc_mismatches += 1;
        }
    }
    for _ in 0..r.mask_cases {
        let n = rng.gen_range(1..10);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        mask[0] = true;
        let base = masked_mse(&Tensor::column(pred.clone()), &Tensor::column(target.clone()), &mask)?;
        let (mut p2, mut t2) = (pred, target);
        for i in (0..n).filter(|&i| !mask[i]) {
            p2[i] = rng.gen_range(-100.0..100.0);
            t2[i] = rng.gen_range(-100.0..100.0);
        }
        if masked_mse(&Tensor::column(p2), &Tensor::column(t2), &mask)? != base {
            r.mask_changes += 1;
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_oracle_by_hand() {
        // class 0: positives {0.9, 0.5}, negatives {0.5, 0.1}: (1 + 1 + 0.5 + 1) / 4
        let s = vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.5, 0.5], vec![0.1, 0.9]];
        let l = [0, 0, 1, 1];
        assert_eq!(mauc_pairwise(&s, &l), 0.875);
    }

    #[test]
    fn slope_of_a_power_law() {
        let hs = [0.1, 0.05, 0.025];
        let errs: Vec<f64> = hs.iter().map(|h: &f64| 3.0 * h.powi(4)).collect();
        assert!((loglog_slope(&hs, &errs) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn small_runs_are_clean() {
        let g = geometry(1, 50).unwrap();
        assert_eq!(g.identity_failures + g.commutativity_failures, 0);
        let c = closure(1, 50, 50).unwrap();
        assert_eq!(c.cell_failures + c.evolve_failures, 0);
    }
}
