//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{BiasMode, LossKind, ProblemSpec};
use crate::trainer::{LrDecay, TrainConfig, DEFAULT_GRAD_TOL, DEFAULT_RECORD_STRIDE};

use super::IoError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub problem: ProblemSection,
    pub train: Option<TrainSection>,
    pub outputs: Option<OutputsSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    #[serde(rename = "K")]
    pub k: usize,
    pub class_counts: Vec<usize>,
    pub widths: Vec<usize>,
    pub loss: LossName,
    pub bias: BiasName,
    pub lambdas: Lambdas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Mse,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasName {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "last_unreg")]
    LastUnreg,
    #[serde(rename = "last_reg")]
    LastReg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub w: Vec<f64>,
    pub h: f64,
    pub b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub iterations: usize,
    pub lr_decay: Option<LrDecay>,
    pub record_stride: Option<usize>,
    pub seed: u64,
    pub grad_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSection {
    pub dir: PathBuf,
}

/// A parsed and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ProblemSpec,
    pub train: Option<TrainConfig>,
    pub output_dir: Option<PathBuf>,
}

fn invalid(path: &str, message: impl Into<String>) -> IoError {
    IoError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, IoError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RunConfigFile = serde_path_to_error::deserialize(de).map_err(|e| IoError::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    raw.validate()
}

pub fn load_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    parse_config(&text)
}

impl RunConfigFile {
    pub fn validate(self) -> Result<RunConfig, IoError> {
        let p = self.problem;
        if p.k != p.class_counts.len() {
            return Err(invalid(
                "problem.class_counts",
                format!("expected {} entries (K), got {}", p.k, p.class_counts.len()),
            ));
        }
        if p.lambdas.w.len() != p.widths.len() {
            return Err(invalid(
                "problem.lambdas.w",
                format!(
                    "expected {} entries (one per layer), got {}",
                    p.widths.len(),
                    p.lambdas.w.len()
                ),
            ));
        }
        let bias = match (p.bias, p.lambdas.b) {
            (BiasName::None, None) => BiasMode::None,
            (BiasName::LastUnreg, None) => BiasMode::LastLayerUnregularized,
            (BiasName::LastReg, Some(b)) => BiasMode::LastLayerRegularized(b),
            (BiasName::LastReg, None) => {
                return Err(invalid("problem.lambdas.b", "required when bias is last_reg"))
            }
            (_, Some(_)) => {
                return Err(invalid(
                    "problem.lambdas.b",
                    "only allowed when bias is last_reg",
                ))
            }
        };
        let loss = match p.loss {
            LossName::Mse => LossKind::Mse,
            LossName::Ce => LossKind::CrossEntropy,
        };
        let spec = ProblemSpec::new(p.class_counts, p.widths, loss, bias, p.lambdas.w, p.lambdas.h)
            .map_err(|e| invalid("problem", e.to_string()))?;
        let train = self
            .train
            .map(|t| {
                let cfg = TrainConfig {
                    lr: t.lr,
                    iterations: t.iterations,
                    lr_decay: t.lr_decay,
                    record_stride: t.record_stride.unwrap_or(DEFAULT_RECORD_STRIDE),
                    grad_tol: Some(t.grad_tol.unwrap_or(DEFAULT_GRAD_TOL)),
                    seed: t.seed,
                };
                cfg.validate()
                    .map(|_| cfg)
                    .map_err(|e| invalid("train", e.to_string()))
            })
            .transpose()?;
        Ok(RunConfig {
            spec,
            train,
            output_dir: self.outputs.map(|o| o.dir),
        })
    }
}
