//! Command-line front end.
//!
//! Exit codes: 0 success, 2 bad input, 3 unsupported regime or degenerate
//! input, 4 divergence, 5 a deviation above tolerance.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::io::{
    load_config, named_to_state, read_checkpoint, trajectory_csv, write_checkpoint, write_json,
    IoError, RunConfig,
};
use crate::linalg::DenseMatrix;
use crate::metrics::{compare_to_theory, measure_strict, Flavor, MetricReport, MetricsError};
use crate::model::{init_state, LossKind};
use crate::theory::{
    minority_collapse_threshold, predict, BiasPrediction, TheoryError, TheoryPrediction,
};
use crate::trainer::{train_observed, Observe, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_REGIME: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_TOLERANCE: i32 = 5;

pub const DEFAULT_TOL: f64 = 1e-2;

#[derive(Debug, Parser)]
#[command(name = "ncdl", version, about = "Neural collapse in deep linear unconstrained-features models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the closed-form prediction for a configuration as JSON.
    Theory {
        #[arg(long)]
        config: PathBuf,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write trajectory.csv, final.ncdl and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `outputs.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the NC metrics of a checkpoint as JSON.
    Metrics {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        flavor: Option<FlavorArg>,
    },
    /// Compare a finished run with the prediction.
    Compare {
        run_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FlavorArg {
    Of,
    Etf,
    Gof,
}

impl From<FlavorArg> for Flavor {
    fn from(f: FlavorArg) -> Self {
        match f {
            FlavorArg::Of => Flavor::Of,
            FlavorArg::Etf => Flavor::Etf,
            FlavorArg::Gof => Flavor::Gof,
        }
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::new(EXIT_INPUT, e.to_string())
    }
}

impl From<TheoryError> for Failure {
    fn from(e: TheoryError) -> Self {
        let code = match e {
            TheoryError::Unsupported(_) | TheoryError::WrongRegime(_) => EXIT_REGIME,
            _ => EXIT_INPUT,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let code = match e {
            MetricsError::Degenerate(_) | MetricsError::RegimeMismatch(_) => EXIT_REGIME,
            _ => EXIT_INPUT,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Diverged { .. } => EXIT_DIVERGED,
            TrainError::Metrics(MetricsError::Degenerate(_)) => EXIT_REGIME,
            _ => EXIT_INPUT,
        };
        Failure::new(code, e.to_string())
    }
}

/// Runs a parsed command, writing results to `stdout`.
pub fn run(cli: Cli, stdout: &mut String) -> Result<(), Failure> {
    match cli.command {
        Command::Theory { config, out } => cmd_theory(&config, out.as_deref(), stdout),
        Command::Train { config, out } => cmd_train(&config, out.as_deref(), stdout),
        Command::Metrics {
            checkpoint,
            config,
            flavor,
        } => cmd_metrics(&checkpoint, &config, flavor.map(Flavor::from), stdout),
        Command::Compare {
            run_dir,
            config,
            tol,
        } => cmd_compare(&run_dir, &config, tol, stdout),
    }
}

fn rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

#[derive(Serialize)]
struct Targets {
    w_gram: Vec<Vec<f64>>,
    h_gram: Vec<Vec<f64>>,
    wh: Vec<Vec<f64>>,
    product_gram: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct TheoryDocument<'a> {
    regime: &'static str,
    regime_detail: &'a crate::theory::Regime,
    geometry: &'static str,
    a: Option<f64>,
    c: Option<f64>,
    threshold: Option<f64>,
    class_b: &'a [f64],
    x_star: &'a [f64],
    singular_values: &'a [f64],
    product_singular_values: &'a [f64],
    rank_cap: usize,
    active_rank: usize,
    bottleneck_block: Option<(usize, usize)>,
    predicted_loss: Option<f64>,
    predicted_bias: &'a BiasPrediction,
    duality: &'a [f64],
    minority_collapse: Option<Vec<bool>>,
    targets: Targets,
}

fn theory_document<'a>(pred: &'a TheoryPrediction, cfg: &RunConfig) -> TheoryDocument<'a> {
    let minority_collapse = (cfg.spec.depth() == 1 && cfg.spec.loss() == LossKind::Mse)
        .then(|| minority_collapse_threshold(&cfg.spec).ok())
        .flatten();
    TheoryDocument {
        regime: pred.regime.label(),
        regime_detail: &pred.regime,
        geometry: pred.geometry.label(),
        a: pred.a,
        c: pred.c,
        threshold: pred.threshold,
        class_b: &pred.class_b,
        x_star: &pred.x_star,
        singular_values: &pred.singular_values,
        product_singular_values: &pred.product_singular_values,
        rank_cap: pred.rank_cap,
        active_rank: pred.active_rank,
        bottleneck_block: pred.bottleneck_block,
        predicted_loss: pred.predicted_loss,
        predicted_bias: &pred.bias,
        duality: &pred.duality,
        minority_collapse,
        targets: Targets {
            w_gram: rows(&pred.target_w_gram),
            h_gram: rows(&pred.target_h_gram),
            wh: rows(&pred.target_wh),
            product_gram: rows(&pred.target_product_gram),
        },
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::new(EXIT_INPUT, e.to_string()))
}

pub fn cmd_theory(config: &Path, out: Option<&Path>, stdout: &mut String) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let pred = predict(&cfg.spec)?;
    let doc = theory_document(&pred, &cfg);
    match out {
        Some(path) => write_json(path, &doc)?,
        None => {
            stdout.push_str(&to_json(&doc)?);
            stdout.push('\n');
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ProblemSummary {
    num_classes: usize,
    depth: usize,
    class_counts: Vec<usize>,
    widths: Vec<usize>,
    loss: LossKind,
    has_bias: bool,
}

#[derive(Serialize)]
struct FinalSummary {
    iteration: usize,
    loss: f64,
    grad_norm: f64,
    stopped_early: bool,
}

#[derive(Serialize)]
struct PredictionSummary {
    regime: &'static str,
    geometry: &'static str,
    predicted_loss: Option<f64>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    problem: ProblemSummary,
    #[serde(rename = "final")]
    last: FinalSummary,
    metrics: Option<&'a MetricReport>,
    prediction: Option<PredictionSummary>,
}

fn problem_summary(cfg: &RunConfig) -> ProblemSummary {
    ProblemSummary {
        num_classes: cfg.spec.num_classes(),
        depth: cfg.spec.depth(),
        class_counts: cfg.spec.class_counts().to_vec(),
        widths: cfg.spec.widths().to_vec(),
        loss: cfg.spec.loss(),
        has_bias: cfg.spec.bias_mode().has_bias(),
    }
}

fn default_flavor(cfg: &RunConfig) -> Flavor {
    if cfg.spec.bias_mode().has_bias() {
        Flavor::Etf
    } else {
        Flavor::Of
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))
}

pub fn cmd_train(config: &Path, out: Option<&Path>, stdout: &mut String) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let train_cfg = cfg
        .train
        .clone()
        .ok_or_else(|| Failure::new(EXIT_INPUT, "config has no `train` section"))?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Failure::new(EXIT_INPUT, "no output directory (`outputs.dir` or --out)"))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", dir.display())))?;

    let pred = predict(&cfg.spec).ok();
    let observe = match &pred {
        Some(p) => Observe::Compare(p),
        None => Observe::Measure(default_flavor(&cfg)),
    };
    let start = init_state(&cfg.spec, train_cfg.seed);
    let depth = cfg.spec.depth();
    let traj = match train_observed(start, &cfg.spec, &train_cfg, observe) {
        Ok(t) => t,
        Err(TrainError::Diverged {
            iteration,
            loss,
            partial,
        }) => {
            write_text(&dir.join("trajectory.csv"), &trajectory_csv(&partial, depth))?;
            return Err(Failure::new(
                EXIT_DIVERGED,
                format!("diverged at iteration {iteration} (loss {loss})"),
            ));
        }
        Err(e) => return Err(e.into()),
    };

    write_text(&dir.join("trajectory.csv"), &trajectory_csv(&traj, depth))?;
    write_checkpoint(&dir.join("final.ncdl"), &traj.final_state)?;
    let summary = RunSummary {
        problem: problem_summary(&cfg),
        last: FinalSummary {
            iteration: *traj.iterations.last().expect("at least one sample"),
            loss: traj.final_loss(),
            grad_norm: traj.final_grad_norm,
            stopped_early: traj.stopped_early,
        },
        metrics: traj.final_report(),
        prediction: pred.as_ref().map(|p| PredictionSummary {
            regime: p.regime.label(),
            geometry: p.geometry.label(),
            predicted_loss: p.predicted_loss,
        }),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    writeln!(
        stdout,
        "trained {} iterations, final loss {:.6e}; wrote {}",
        summary.last.iteration,
        summary.last.loss,
        dir.display()
    )
    .expect("writing to a String");
    Ok(())
}

pub fn cmd_metrics(
    checkpoint: &Path,
    config: &Path,
    flavor: Option<Flavor>,
    stdout: &mut String,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let state = named_to_state(read_checkpoint(checkpoint)?, &cfg.spec)?;
    let flavor = flavor.unwrap_or_else(|| default_flavor(&cfg));
    let pred = if flavor == Flavor::Gof {
        Some(predict(&cfg.spec)?)
    } else {
        None
    };
    let report = measure_strict(&state, &cfg.spec, flavor, pred.as_ref())?;
    stdout.push_str(&to_json(&report)?);
    stdout.push('\n');
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.6e}"))
}

pub fn cmd_compare(
    run_dir: &Path,
    config: &Path,
    tol: f64,
    stdout: &mut String,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let summary_path = run_dir.join("summary.json");
    let summary_text = std::fs::read_to_string(&summary_path)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", summary_path.display())))?;
    let summary: serde_json::Value = serde_json::from_str(&summary_text)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", summary_path.display())))?;
    let state = named_to_state(read_checkpoint(&run_dir.join("final.ncdl"))?, &cfg.spec)?;
    let recorded = (
        summary["problem"]["num_classes"].as_u64(),
        summary["problem"]["depth"].as_u64(),
    );
    if recorded != (Some(cfg.spec.num_classes() as u64), Some(cfg.spec.depth() as u64)) {
        return Err(Failure::new(
            EXIT_REGIME,
            "run summary does not match the configuration",
        ));
    }
    let pred = predict(&cfg.spec)?;
    let report = compare_to_theory(&state, &cfg.spec, &pred)?;
    let dev = report.theory.as_ref().expect("compare_to_theory fills theory");

    let mut checks: Vec<(String, Option<f64>)> = vec![("nc_max".into(), report.max_nc())];
    if pred.predicted_loss.is_some() {
        checks.push(("relative_loss_gap".into(), dev.relative_loss_gap.or(dev.loss_gap)));
    }
    for (k, v) in dev.singular_value_deviation.iter().enumerate() {
        checks.push((format!("singular_value_{}", k + 1), Some(*v)));
    }
    if let Some(b) = dev.bias_deviation {
        checks.push(("bias".into(), Some(b)));
    }

    let out = stdout;
    writeln!(out, "regime {} geometry {}", pred.regime.label(), pred.geometry.label())
        .expect("writing to a String");
    writeln!(
        out,
        "loss {:.6e} predicted {}",
        dev.loss,
        fmt_opt(pred.predicted_loss)
    )
    .expect("writing to a String");
    let mut failed = false;
    for (name, value) in &checks {
        let ok = value.is_some_and(|v| v <= tol);
        failed |= !ok;
        writeln!(
            out,
            "{name:<20} {:>14} {}",
            fmt_opt(*value),
            if ok { "ok" } else { "FAIL" }
        )
        .expect("writing to a String");
    }
    if failed {
        Err(Failure::new(
            EXIT_TOLERANCE,
            format!("deviation above tolerance {tol:e}"),
        ))
    } else {
        Ok(())
    }
}
