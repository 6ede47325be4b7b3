use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rtnag::cohort::{generate_cohort, shifted_cohort, Cohort, CohortConfig};
use rtnag::dataset::{read_dataset, write_dataset};
use rtnag::gradcheck::primitive_suite;
use rtnag_harness::cv::{evaluate, fit, input_kind, samples};
use rtnag_harness::experiments::{
    ablate, non_increasing, run_cv, sweep_horizon, sweep_missing, RunOutput, ABLATION_CASES, HORIZON_YEARS,
    MISSING_RATES,
};
use rtnag_harness::gradsuite::{model_gradient_check, MODEL_TOL};
use rtnag_harness::report::{self, Row};
use rtnag_harness::{checkpoint, checks, ExperimentConfig};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "rtnag", version, about = "Continuous-time progression model on Cholesky space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort as JSON lines.
    Generate(GenerateArgs),
    /// Train on a whole cohort and save the parameters.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a saved model on the held-out last visits of a cohort.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs/evaluate")]
        out: PathBuf,
        /// Score only each subject's last visit.
        #[arg(long)]
        final_only: bool,
    },
    /// K-fold cross-validation.
    Cv(ExpArgs),
    /// Cross-validation after injecting extra missing visits.
    SweepMissing {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',', default_values_t = MISSING_RATES)]
        rates: Vec<f64>,
    },
    /// Cross-validation on observation windows of increasing length.
    SweepHorizon {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',', default_values_t = HORIZON_YEARS)]
        years: Vec<u32>,
    },
    /// Cross-validation of model variants on identical folds.
    Ablate {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',', default_values_t = ABLATION_CASES.map(String::from))]
        cases: Vec<String>,
    },
    /// Finite-difference checks of every primitive and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Randomized geometry, closure, solver-order and metric checks.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ExpArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: u64,
    /// Cohort file; a cohort is generated from the configuration if absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_subjects: usize,
    /// Comma-separated visit months, starting at 0.
    #[arg(long, value_delimiter = ',')]
    months: Option<Vec<u32>>,
    #[arg(long, default_value_t = 0.17)]
    visit_drop: f64,
    #[arg(long, default_value_t = 0.28)]
    score_drop: f64,
    #[arg(long, default_value_t = 0.0)]
    label_drop: f64,
    #[arg(long, default_value_t = 0.02)]
    score_noise: f64,
    #[arg(long, default_value_t = 0.1)]
    payload_noise: f64,
    /// Volume side length; 0 writes feature vectors.
    #[arg(long, default_value_t = 0)]
    volume_extent: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Use the shifted generator (faster progression, noisier scores).
    #[arg(long)]
    shifted: bool,
}

impl ExpArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The cohort and a short content hash of its serialized form.
    fn cohort(&self, cfg: &ExperimentConfig) -> Result<(Cohort, String)> {
        let cohort = match &self.data {
            Some(p) => read_dataset(p).with_context(|| format!("reading {}", p.display()))?,
            None => generate_cohort(&cfg.cohort_config())?,
        };
        for s in &cohort.subjects {
            s.validate()?;
        }
        let mut bytes = Vec::new();
        rtnag::dataset::write_cohort(&cohort, &mut bytes)?;
        let hash = hex::encode(&Sha256::digest(&bytes)[..8]);
        Ok((cohort, hash))
    }
}

fn write_run(out_dir: &Path, cfg: &ExperimentConfig, hash: &str, run: &RunOutput, extra: &str) -> Result<()> {
    report::write(&out_dir.join("metrics.csv"), &report::metrics_csv(&run.rows, cfg.timing)?)?;
    for (name, curve) in &run.curves {
        report::write(&out_dir.join("curves").join(format!("{name}.csv")), &report::loss_curve_csv(curve)?)?;
    }
    let mut text = format!("dataset sha256/64: {hash}\n\n{}\n", cfg.echo());
    for n in &run.notes {
        text.push_str(n);
        text.push('\n');
    }
    text.push_str(extra);
    text.push('\n');
    text.push_str(&report::summary(&run.rows));
    report::write(&out_dir.join("summary.txt"), &text)?;
    print!("{}", report::summary(&run.rows));
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = CohortConfig {
        n_subjects: a.n_subjects,
        visit_drop: a.visit_drop,
        score_drop: a.score_drop,
        label_drop: a.label_drop,
        score_noise: a.score_noise,
        payload_noise: a.payload_noise,
        volume_extent: a.volume_extent,
        feature_dim: a.feature_dim,
        seed: a.seed,
        ..CohortConfig::default()
    };
    if let Some(m) = &a.months {
        cfg.months = m.clone();
    }
    let cohort = if a.shifted {
        shifted_cohort(&cfg)?
    } else {
        generate_cohort(&cfg)?
    };
    write_dataset(&cohort, &a.out)?;
    println!(
        "{} subjects, {} visits, missing rate {:.3}, labels {:?}",
        cohort.subjects.len(),
        cohort.num_visits(),
        cohort.missing_rate(),
        cohort.label_counts()
    );
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let start = Instant::now();
    let mut ok = true;
    for c in primitive_suite(seed)? {
        let pass = c.passed();
        ok &= pass;
        println!("{:<18} {:.3e}  (< {:.0e})  {}", c.name, c.max_rel_err, c.tolerance, if pass { "ok" } else { "FAIL" });
    }
    let m = model_gradient_check(seed)?;
    let pass = m.max_rel_err < MODEL_TOL;
    ok &= pass;
    println!(
        "{:<18} {:.3e}  (< {:.0e})  {}  [{} coordinates, worst param {} index {}]",
        "full objective",
        m.max_rel_err,
        MODEL_TOL,
        if pass { "ok" } else { "FAIL" },
        m.coordinates,
        m.param,
        m.index
    );
    println!("{:.1} s", start.elapsed().as_secs_f64());
    Ok(ok)
}

fn line(name: &str, pass: bool, detail: String) -> bool {
    println!("{name:<14} {}  {detail}", if pass { "ok  " } else { "FAIL" });
    pass
}

fn selfcheck(seed: u64) -> Result<bool> {
    let g = checks::geometry(seed, 1000)?;
    let c = checks::closure(seed, 10_000, 10_000)?;
    let s = checks::solver_order()?;
    let o = checks::loss_metric_oracles(seed)?;
    let results = [
        line(
            "geometry",
            g.exp_log <= 1e-12
                && g.associativity <= 1e-12
                && g.wfm <= 1e-12
                && g.identity_failures + g.commutativity_failures == 0,
            format!("{g:?}"),
        ),
        line("closure", c.cell_failures + c.evolve_failures == 0, format!("{c:?}")),
        line(
            "solver order",
            (3.7..=4.3).contains(&s.rk4_slope)
                && (0.8..=1.2).contains(&s.euler_slope)
                && s.zero_dynamics_exact
                && s.zero_interval_exact,
            format!("{s:?}"),
        ),
        line(
            "oracles",
            o.focal_vs_ce <= 1e-12 && o.mauc_mismatches == 0 && o.mask_changes == 0,
            format!("{o:?}"),
        ),
    ];
    Ok(results.iter().all(|&p| p))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(a) => generate(&a)?,
        Command::Train { exp, checkpoint: path } => {
            let cfg = exp.config()?;
            let (cohort, hash) = exp.cohort(&cfg)?;
            let subjects: Vec<_> = cohort.subjects.iter().collect();
            let (model, curve) = fit(&cfg, input_kind(&cohort)?, &subjects, cfg.seed)?;
            checkpoint::save(&model, &path)?;
            report::write(&exp.out.join("curves").join("train.csv"), &report::loss_curve_csv(&curve.epochs)?)?;
            println!(
                "dataset {hash}: final loss {:.6}, saved {}",
                curve.epochs.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Evaluate { checkpoint: path, data, out, final_only } => {
            let model = checkpoint::load(&path)?;
            let cohort = read_dataset(&data)?;
            let subjects: Vec<_> = cohort.subjects.iter().collect();
            let metrics = evaluate(&model, &samples(&subjects)?, final_only)?;
            let row = Row {
                experiment: "evaluate".into(),
                case: data.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned()),
                fold: 0,
                metrics,
                wall_s: 0.0,
            };
            report::write(&out.join("metrics.csv"), &report::metrics_csv(std::slice::from_ref(&row), false)?)?;
            print!("{}", report::summary(&[row]));
        }
        Command::Cv(exp) => {
            let cfg = exp.config()?;
            let (cohort, hash) = exp.cohort(&cfg)?;
            write_run(&exp.out, &cfg, &hash, &run_cv(&cfg, &cohort)?, "")?;
        }
        Command::SweepMissing { exp, rates } => {
            let cfg = exp.config()?;
            let (cohort, hash) = exp.cohort(&cfg)?;
            let run = sweep_missing(&cfg, &cohort, &rates)?;
            let means: Vec<f64> = report::group_means(&run.rows, 0).iter().map(|g| g.2).collect();
            let flag = format!("mAUC non-increasing within 0.02: {}", non_increasing(&means, 0.02));
            write_run(&exp.out, &cfg, &hash, &run, &flag)?;
            println!("{flag}");
        }
        Command::SweepHorizon { exp, years } => {
            let cfg = exp.config()?;
            let (cohort, hash) = exp.cohort(&cfg)?;
            write_run(&exp.out, &cfg, &hash, &sweep_horizon(&cfg, &cohort, &years)?, "")?;
        }
        Command::Ablate { exp, cases } => {
            let cfg = exp.config()?;
            let (cohort, hash) = exp.cohort(&cfg)?;
            let names: Vec<&str> = cases.iter().map(String::as_str).collect();
            write_run(&exp.out, &cfg, &hash, &ablate(&cfg, &cohort, &names)?, "")?;
        }
        Command::Gradcheck { seed } => return gradcheck(seed),
        Command::Selfcheck { seed } => return selfcheck(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("invariant check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_consistent() {
        Cli::command().debug_assert();
    }
}
