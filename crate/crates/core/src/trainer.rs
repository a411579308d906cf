//! Full-batch gradient descent with optional step decay.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{compare_to_theory, measure, Flavor, MetricReport, MetricsError};
use crate::model::{init_state, loss_and_gradient, ModelError, NetworkState, ProblemSpec};
use crate::theory::{predict, TheoryPrediction};

/// Loss above this counts as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e12;
pub const DEFAULT_GRAD_TOL: f64 = 1e-10;
pub const DEFAULT_RECORD_STRIDE: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: usize,
        loss: f64,
        partial: Box<Trajectory>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub lr_decay: Option<LrDecay>,
    pub record_stride: usize,
    /// Stop once the gradient norm drops below this.
    pub grad_tol: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(lr: f64, iterations: usize, seed: u64) -> Self {
        Self {
            lr,
            iterations,
            lr_decay: None,
            record_stride: DEFAULT_RECORD_STRIDE,
            grad_tol: Some(DEFAULT_GRAD_TOL),
            seed,
        }
    }

    /// A zero learning rate is accepted (the state stays at its initialisation).
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "lr must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        if self.iterations == 0 {
            return Err(TrainError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.record_stride == 0 {
            return Err(TrainError::InvalidConfig("record_stride must be >= 1".into()));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0 && d.factor.is_finite()) || d.every == 0 {
                return Err(TrainError::InvalidConfig(format!(
                    "lr_decay needs factor > 0 and every >= 1, got {d:?}"
                )));
            }
        }
        if let Some(t) = self.grad_tol {
            if !(t >= 0.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "grad_tol must be nonnegative, got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Step size used for the step taken at iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr * d.factor.powi((t / d.every) as i32),
            None => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub iterations: Vec<usize>,
    pub losses: Vec<f64>,
    /// One per sample unless only the loss is observed.
    pub reports: Vec<MetricReport>,
    pub final_state: NetworkState,
    pub final_grad_norm: f64,
    pub stopped_early: bool,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one sample")
    }

    pub fn final_report(&self) -> Option<&MetricReport> {
        self.reports.last()
    }
}

/// One plain gradient step.
pub fn step(state: &NetworkState, spec: &ProblemSpec, lr: f64) -> Result<NetworkState, ModelError> {
    let (_, g) = loss_and_gradient(state, spec)?;
    let mut next = state.clone();
    next.axpy(-lr, &g);
    Ok(next)
}

/// Gradient descent from the seeded initialisation.
///
/// Samples iteration 0, every `record_stride`-th iterate and the final one.
pub fn train(
    spec: &ProblemSpec,
    config: &TrainConfig,
    prediction: Option<&TheoryPrediction>,
) -> Result<Trajectory, TrainError> {
    train_from(init_state(spec, config.seed), spec, config, prediction)
}

/// Gradient descent from a given state.
pub fn train_from(
    start: NetworkState,
    spec: &ProblemSpec,
    config: &TrainConfig,
    prediction: Option<&TheoryPrediction>,
) -> Result<Trajectory, TrainError> {
    let observe = match prediction {
        Some(p) => Observe::Compare(p),
        None => Observe::Loss,
    };
    train_observed(start, spec, config, observe)
}

/// What to record at each sampled iterate besides the loss.
#[derive(Debug, Clone, Copy)]
pub enum Observe<'a> {
    Loss,
    /// NC metrics in a fixed flavor, without a theory comparison.
    Measure(Flavor),
    Compare(&'a TheoryPrediction),
}

pub fn train_observed(
    start: NetworkState,
    spec: &ProblemSpec,
    config: &TrainConfig,
    observe: Observe<'_>,
) -> Result<Trajectory, TrainError> {
    config.validate()?;
    start.validate(spec)?;
    let mut traj = Trajectory {
        iterations: Vec::new(),
        losses: Vec::new(),
        reports: Vec::new(),
        final_state: start,
        final_grad_norm: f64::NAN,
        stopped_early: false,
    };
    let tol = config.grad_tol.unwrap_or(0.0);
    let mut t = 0;
    loop {
        let evaluated = loss_and_gradient(&traj.final_state, spec);
        let (value, grad) = match evaluated {
            Ok((v, g)) if v <= DIVERGENCE_LOSS => (v, g),
            Ok((v, _)) => return Err(diverged(traj, t, v)),
            Err(ModelError::NumericalOverflow { value }) => return Err(diverged(traj, t, value)),
            Err(e) => return Err(e.into()),
        };
        let gnorm = grad.norm();
        let converged = gnorm < tol;
        let last = t == config.iterations || converged;
        if t % config.record_stride == 0 || last {
            traj.iterations.push(t);
            traj.losses.push(value);
            match observe {
                Observe::Loss => {}
                Observe::Measure(f) => traj
                    .reports
                    .push(measure(&traj.final_state, spec, f, None)?),
                Observe::Compare(p) => traj
                    .reports
                    .push(compare_to_theory(&traj.final_state, spec, p)?),
            }
        }
        if last {
            traj.final_grad_norm = gnorm;
            traj.stopped_early = converged && t < config.iterations;
            return Ok(traj);
        }
        traj.final_state.axpy(-config.lr_at(t), &grad);
        t += 1;
    }
}

fn diverged(mut traj: Trajectory, iteration: usize, loss: f64) -> TrainError {
    traj.stopped_early = true;
    TrainError::Diverged {
        iteration,
        loss,
        partial: Box::new(traj),
    }
}

#[derive(Debug)]
pub struct SweepResult {
    /// In the order of the input specs.
    pub runs: Vec<Result<Trajectory, TrainError>>,
    /// `(index, message)` for every failed run.
    pub failures: Vec<(usize, String)>,
}

/// Independent trainings, run in parallel. Each run is compared against its
/// own theory prediction when one exists.
pub fn sweep(specs: &[ProblemSpec], config: &TrainConfig) -> Result<SweepResult, TrainError> {
    if specs.is_empty() {
        return Err(TrainError::InvalidConfig("sweep needs at least one spec".into()));
    }
    let runs: Vec<Result<Trajectory, TrainError>> = specs
        .par_iter()
        .map(|spec| {
            let pred = predict(spec).ok();
            train(spec, config, pred.as_ref())
        })
        .collect();
    let failures = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().err().map(|e| (i, e.to_string())))
        .collect();
    Ok(SweepResult { runs, failures })
}
