//! Closed-form global minimizers of the MSE objective and the structural
//! prediction for balanced cross-entropy.
//!
//! Every optimal singular value comes from minimising the scalar surrogate
//! `g(x) = 1/(x^M + 1) + b·x` over `x ≥ 0`, with `b_k = M·a/n_k` and
//! `a = N·(N·λ_{W_M}⋯λ_{W_1}·λ_H)^{1/M}`. A nontrivial minimizer `x*` maps back to
//! `s = (Nλ_H·x*^M / c)^{1/(2M)}` with `c = λ_{W_1}^{M−1}/(λ_{W_M}⋯λ_{W_2})`, and the
//! end-to-end product then has singular values `√(c·s^{2M})`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{
    centering, random_centered_orthonormal, random_orthonormal, DenseMatrix, LinalgError,
};
use crate::model::{optimal_features_given_weights, BiasMode, LossKind, ModelError, NetworkState, ProblemSpec};

/// Half-width of the band in which `b` counts as sitting exactly on the threshold.
pub const TIE_BAND: f64 = 1e-12;

const BISECTION_TOL: f64 = 1e-13;
const MAX_BISECTION_STEPS: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("wrong regime: {0}")]
    WrongRegime(String),
    #[error("unsupported regime: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "x_star")]
pub enum GMinimizerKind {
    ZeroOnly,
    NontrivialOnly(f64),
    /// Both `0` and the carried `x*` attain the minimum.
    Tie(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GMinimizerCase {
    pub depth: usize,
    pub b: f64,
    pub kind: GMinimizerKind,
}

impl GMinimizerCase {
    /// The nontrivial minimizer when one exists (also at a tie).
    pub fn x_star(&self) -> Option<f64> {
        match self.kind {
            GMinimizerKind::ZeroOnly => None,
            GMinimizerKind::NontrivialOnly(x) | GMinimizerKind::Tie(x) => Some(x),
        }
    }

    pub fn is_tie(&self) -> bool {
        matches!(self.kind, GMinimizerKind::Tie(_))
    }

    /// Minimum value of `g`.
    pub fn min_value(&self) -> f64 {
        match self.kind {
            GMinimizerKind::NontrivialOnly(x) => g_value(self.depth, self.b, x),
            _ => 1.0,
        }
    }
}

pub fn g_value(depth: usize, b: f64, x: f64) -> f64 {
    1.0 / (x.powi(depth as i32) + 1.0) + b * x
}

pub fn g_derivative(depth: usize, b: f64, x: f64) -> f64 {
    let m = depth as i32;
    let xm = x.powi(m);
    b - depth as f64 * x.powi(m - 1) / ((xm + 1.0) * (xm + 1.0))
}

/// `(M−1)^{(M−1)/M} / M`: above it `g` is minimised only at `0`.
pub fn g_threshold(depth: usize) -> Result<f64, TheoryError> {
    if depth < 2 {
        return Err(TheoryError::InvalidArgument(format!(
            "threshold is defined for depth >= 2, got {depth}"
        )));
    }
    let m = depth as f64;
    Ok((m - 1.0).powf((m - 1.0) / m) / m)
}

/// Threshold on `b` for any depth (`1` for the single-layer case).
fn threshold_for(depth: usize) -> f64 {
    if depth == 1 {
        1.0
    } else {
        g_threshold(depth).expect("depth >= 2")
    }
}

/// Global minimizer of `g` on `x ≥ 0` for `M ≥ 2`.
pub fn g_minimize(depth: usize, b: f64) -> Result<GMinimizerCase, TheoryError> {
    let threshold = g_threshold(depth)?;
    if !(b > 0.0 && b.is_finite()) {
        return Err(TheoryError::InvalidArgument(format!(
            "b must be positive and finite, got {b}"
        )));
    }
    let lo = (depth as f64 - 1.0).powf(1.0 / depth as f64);
    let kind = if b > threshold + TIE_BAND {
        GMinimizerKind::ZeroOnly
    } else if b >= threshold - TIE_BAND {
        GMinimizerKind::Tie(lo)
    } else {
        GMinimizerKind::NontrivialOnly(bisect_root(depth, b, lo))
    };
    Ok(GMinimizerCase { depth, b, kind })
}

/// Root of `g'` to the right of `lo`, where `g'(lo) < 0`.
fn bisect_root(depth: usize, b: f64, lo: f64) -> f64 {
    let mut lo = lo;
    let mut hi = lo.max(1.0);
    while g_derivative(depth, b, hi) <= 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..MAX_BISECTION_STEPS {
        if hi - lo < BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g_derivative(depth, b, mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Minimizer of `1/(x+1) + a·x`: `√(1/a) − 1` below `a = 1`, zero above.
pub fn plain_minimize(a: f64) -> Result<GMinimizerCase, TheoryError> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(TheoryError::InvalidArgument(format!(
            "a must be positive and finite, got {a}"
        )));
    }
    let kind = if a > 1.0 + TIE_BAND {
        GMinimizerKind::ZeroOnly
    } else if a >= 1.0 - TIE_BAND {
        GMinimizerKind::Tie(0.0)
    } else {
        GMinimizerKind::NontrivialOnly((1.0 / a).sqrt() - 1.0)
    };
    Ok(GMinimizerCase { depth: 1, b: a, kind })
}

fn minimize_any(depth: usize, b: f64) -> Result<GMinimizerCase, TheoryError> {
    if depth == 1 {
        plain_minimize(b)
    } else {
        g_minimize(depth, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Regime {
    /// Every class that fits under the rank cap is active.
    AllActive,
    /// Classes from this index on collapse to zero.
    PartialCollapse(usize),
    FullCollapse,
    /// These classes sit exactly on the threshold.
    ThresholdTie(Vec<usize>),
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::AllActive => "nontrivial",
            Regime::PartialCollapse(_) => "partial_collapse",
            Regime::FullCollapse => "trivial",
            Regime::ThresholdTie(_) => "threshold_tie",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Geometry {
    #[serde(rename = "OF")]
    Of,
    #[serde(rename = "ETF")]
    Etf,
    #[serde(rename = "GOF")]
    Gof,
    Zero,
}

impl Geometry {
    pub fn label(self) -> &'static str {
        match self {
            Geometry::Of => "OF",
            Geometry::Etf => "ETF",
            Geometry::Gof => "GOF",
            Geometry::Zero => "Zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BiasPrediction {
    None,
    Exact(Vec<f64>),
    /// Constant vector of unknown magnitude.
    Constant,
}

/// Which global minimizer to build when a class sits on the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBranch {
    #[default]
    Nontrivial,
    Trivial,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryPrediction {
    pub regime: Regime,
    pub geometry: Geometry,
    pub loss: LossKind,
    pub has_bias: bool,
    pub depth: usize,
    pub num_classes: usize,
    /// `N·(N·Πλ)^{1/M}`; absent for cross-entropy.
    pub a: Option<f64>,
    pub c: Option<f64>,
    /// Threshold on `b` (`1` when `M = 1`).
    pub threshold: Option<f64>,
    /// Per-class `b_k = M·a/n_k`.
    pub class_b: Vec<f64>,
    /// Per-class nontrivial minimizer of `g`, zero for inactive classes.
    pub x_star: Vec<f64>,
    /// Per-class `s_k` (descending); empty when the scale is unknown.
    pub singular_values: Vec<f64>,
    /// Per-class `√(c·s_k^{2M})`, the singular values of `W_M⋯W₁`.
    pub product_singular_values: Vec<f64>,
    pub rank_cap: usize,
    pub active_rank: usize,
    /// Classes `[start, end)` whose rank truncation is not unique; targets on
    /// this block are only meaningful up to rotation.
    pub bottleneck_block: Option<(usize, usize)>,
    pub target_w_gram: DenseMatrix,
    pub target_h_gram: DenseMatrix,
    pub target_wh: DenseMatrix,
    pub target_product_gram: DenseMatrix,
    pub predicted_loss: Option<f64>,
    pub bias: BiasPrediction,
    /// Per-class `κ_k` with `(W_M⋯W₁)_k = κ_k·h_k`.
    pub duality: Vec<f64>,
}

impl TheoryPrediction {
    /// Targets are only defined up to rotation (rank truncation of a tied block).
    pub fn compare_spectra(&self) -> bool {
        self.bottleneck_block.is_some()
    }
}

/// `λ_{W_1}^{M−1} / (λ_{W_M}⋯λ_{W_2})`.
fn c_constant(spec: &ProblemSpec) -> f64 {
    let lw = spec.lambda_w();
    let m = lw.len();
    lw[0].powi(m as i32 - 1) / lw[1..].iter().product::<f64>()
}

fn a_constant(spec: &ProblemSpec) -> f64 {
    let n = spec.total_samples() as f64;
    let prod: f64 = spec.lambda_w().iter().product::<f64>() * spec.lambda_h();
    n * (n * prod).powf(1.0 / spec.depth() as f64)
}

fn require_positive_lambdas(spec: &ProblemSpec) -> Result<(), TheoryError> {
    if spec.lambda_w().iter().all(|&l| l > 0.0) && spec.lambda_h() > 0.0 {
        Ok(())
    } else {
        Err(TheoryError::InvalidArgument(
            "closed-form optima need every weight decay > 0".into(),
        ))
    }
}

fn require_mse(spec: &ProblemSpec) -> Result<(), TheoryError> {
    if spec.loss() == LossKind::Mse {
        Ok(())
    } else {
        Err(TheoryError::WrongRegime("expected the MSE loss".into()))
    }
}

fn min_width(spec: &ProblemSpec) -> usize {
    *spec.widths().iter().min().expect("at least one layer")
}

fn s_from_x(spec: &ProblemSpec, c: f64, x: f64) -> f64 {
    let m = spec.depth() as f64;
    let n = spec.total_samples() as f64;
    (n * spec.lambda_h() * x.powf(m) / c).powf(1.0 / (2.0 * m))
}

fn x_from_s(spec: &ProblemSpec, c: f64, s: f64) -> f64 {
    let m = spec.depth() as f64;
    let n = spec.total_samples() as f64;
    (c * s.powf(2.0 * m) / (n * spec.lambda_h())).powf(1.0 / m)
}

/// Per-class solutions of the scalar problem.
fn class_cases(spec: &ProblemSpec, a: f64) -> Result<Vec<GMinimizerCase>, TheoryError> {
    let m = spec.depth() as f64;
    spec.class_counts()
        .iter()
        .map(|&n| minimize_any(spec.depth(), m * a / n as f64))
        .collect()
}

struct Assembly {
    regime: Regime,
    geometry: Geometry,
    cases: Vec<GMinimizerCase>,
    s: Vec<f64>,
    rank_cap: usize,
    bottleneck_block: Option<(usize, usize)>,
    centered: bool,
}

fn finish(spec: &ProblemSpec, a: f64, c: f64, asm: Assembly) -> TheoryPrediction {
    let k = spec.num_classes();
    let depth = spec.depth();
    let n_total = spec.total_samples() as f64;
    let mu = n_total * spec.lambda_h();
    let lw = spec.lambda_w();
    let q: Vec<f64> = asm
        .s
        .iter()
        .map(|&s| c * s.powf(2.0 * depth as f64))
        .collect();

    let diag_target = |f: &dyn Fn(usize) -> f64| {
        let d = DenseMatrix::from_diag(&(0..k).map(f).collect::<Vec<_>>());
        if asm.centered && asm.bottleneck_block.is_none() {
            // Every active direction is equal and spans the centred subspace.
            let scale = d.diag().iter().cloned().fold(0.0, f64::max);
            centering(k).scale(scale)
        } else {
            d
        }
    };
    let target_w_gram = diag_target(&|i| lw[0] / lw[depth - 1] * asm.s[i] * asm.s[i]);
    let target_product_gram = diag_target(&|i| q[i]);
    let target_h_gram = diag_target(&|i| q[i] / ((q[i] + mu) * (q[i] + mu)));
    let target_wh = diag_target(&|i| q[i] / (q[i] + mu));

    let active_rank = asm.s.iter().filter(|&&s| s > 0.0).count();
    // Centred and bottlenecked solutions index q by direction, not by class:
    // every class in the rotated block sees the block's common value.
    let q_max = |range: std::ops::Range<usize>| q[range].iter().cloned().fold(0.0, f64::max);
    let duality = spec
        .class_counts()
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if depth == 1 {
                (n as f64 * spec.lambda_h() / lw[0]).sqrt()
            } else if let Some((lo, hi)) = asm.bottleneck_block.filter(|&(lo, hi)| lo <= i && i < hi) {
                q_max(lo..hi) + mu
            } else if asm.centered {
                q_max(0..k) + mu
            } else {
                q[i] + mu
            }
        })
        .collect();
    let bias = if asm.centered {
        BiasPrediction::Exact(vec![1.0 / k as f64; k])
    } else {
        BiasPrediction::None
    };

    let mut pred = TheoryPrediction {
        regime: asm.regime,
        geometry: asm.geometry,
        loss: LossKind::Mse,
        has_bias: asm.centered,
        depth,
        num_classes: k,
        a: Some(a),
        c: Some(c),
        threshold: Some(threshold_for(depth)),
        class_b: asm.cases.iter().map(|cs| cs.b).collect(),
        x_star: asm
            .cases
            .iter()
            .map(|cs| cs.x_star().unwrap_or(0.0))
            .collect(),
        singular_values: asm.s,
        product_singular_values: q.iter().map(|v| v.sqrt()).collect(),
        rank_cap: asm.rank_cap,
        active_rank,
        bottleneck_block: asm.bottleneck_block,
        target_w_gram,
        target_h_gram,
        target_wh,
        target_product_gram,
        predicted_loss: None,
        bias,
        duality,
    };
    pred.predicted_loss = Some(loss_from_singular_values(spec, &pred));
    pred
}

/// Objective value implied by a prediction's singular values: each active
/// direction contributes `g_{b_k}(x_k)` and each inactive one `g(0) = 1`,
/// weighted by `n_k/(2N)` (or `1/(2K)` in the centred case, where the
/// all-ones direction is absorbed by the bias).
pub fn loss_from_singular_values(spec: &ProblemSpec, pred: &TheoryPrediction) -> f64 {
    let depth = spec.depth();
    let c = pred.c.unwrap_or(1.0);
    let k = spec.num_classes();
    let n_total = spec.total_samples() as f64;
    let g_at = |i: usize| {
        let s = pred.singular_values[i];
        if s > 0.0 {
            g_value(depth, pred.class_b[i], x_from_s(spec, c, s))
        } else {
            1.0
        }
    };
    if pred.has_bias {
        let directions = k - 1;
        let sum: f64 = (0..directions).map(g_at).sum();
        sum / (2.0 * k as f64)
    } else {
        spec.class_counts()
            .iter()
            .enumerate()
            .map(|(i, &n)| n as f64 / (2.0 * n_total) * g_at(i))
            .sum()
    }
}

/// Balanced MSE with no bias (OF) or an unregularised last-layer bias (ETF).
pub fn predict_balanced(spec: &ProblemSpec) -> Result<TheoryPrediction, TheoryError> {
    require_mse(spec)?;
    require_positive_lambdas(spec)?;
    if !spec.is_balanced() {
        return Err(TheoryError::WrongRegime(
            "balanced prediction needs equal class counts".into(),
        ));
    }
    let centered = match spec.bias_mode() {
        BiasMode::None => false,
        BiasMode::LastLayerUnregularized => true,
        BiasMode::LastLayerRegularized(_) => {
            return Err(TheoryError::Unsupported(
                "no closed form with a regularised bias".into(),
            ))
        }
    };
    let k = spec.num_classes();
    let a = a_constant(spec);
    let c = c_constant(spec);
    let cases = class_cases(spec, a)?;
    let case = cases[0];
    let full = if centered { k - 1 } else { k };
    let rank_cap = full.min(min_width(spec));

    let (regime, r) = match case.kind {
        GMinimizerKind::ZeroOnly => (Regime::FullCollapse, 0),
        GMinimizerKind::Tie(_) => (Regime::ThresholdTie((0..k).collect()), rank_cap),
        GMinimizerKind::NontrivialOnly(_) => (Regime::AllActive, rank_cap),
    };
    let s_val = case.x_star().map_or(0.0, |x| s_from_x(spec, c, x));
    let s: Vec<f64> = (0..k).map(|i| if i < r { s_val } else { 0.0 }).collect();
    let geometry = match (r, centered) {
        (0, _) => Geometry::Zero,
        (_, false) => Geometry::Of,
        (_, true) => Geometry::Etf,
    };
    let bottleneck_block = (r > 0 && r < full).then_some((0, k));
    Ok(finish(
        spec,
        a,
        c,
        Assembly {
            regime,
            geometry,
            cases,
            s,
            rank_cap,
            bottleneck_block,
            centered,
        },
    ))
}

fn predict_imbalanced(spec: &ProblemSpec) -> Result<TheoryPrediction, TheoryError> {
    require_mse(spec)?;
    require_positive_lambdas(spec)?;
    if spec.bias_mode() != BiasMode::None {
        return Err(TheoryError::Unsupported(
            "imbalanced closed form is only known without bias".into(),
        ));
    }
    let k = spec.num_classes();
    let a = a_constant(spec);
    let c = c_constant(spec);
    let cases = class_cases(spec, a)?;
    let rank_cap = k.min(min_width(spec));
    let eligible = cases.iter().filter(|cs| cs.x_star().is_some()).count();
    let r = eligible.min(rank_cap);
    let counts = spec.class_counts();
    let bottleneck_block = if eligible > rank_cap && r > 0 && counts[r - 1] == counts[r] {
        let tied = counts[r - 1];
        let start = counts.iter().position(|&n| n == tied).expect("present");
        let end = counts.iter().rposition(|&n| n == tied).expect("present") + 1;
        Some((start, end))
    } else {
        None
    };
    let ties: Vec<usize> = (0..k).filter(|&i| cases[i].is_tie()).collect();
    let regime = if !ties.is_empty() {
        Regime::ThresholdTie(ties)
    } else if eligible == 0 {
        Regime::FullCollapse
    } else if eligible == k {
        Regime::AllActive
    } else {
        Regime::PartialCollapse(eligible)
    };
    let s: Vec<f64> = (0..k)
        .map(|i| {
            if i < r {
                s_from_x(spec, c, cases[i].x_star().expect("eligible"))
            } else {
                0.0
            }
        })
        .collect();
    let geometry = if r == 0 { Geometry::Zero } else { Geometry::Gof };
    Ok(finish(
        spec,
        a,
        c,
        Assembly {
            regime,
            geometry,
            cases,
            s,
            rank_cap,
            bottleneck_block,
            centered: false,
        },
    ))
}

/// Single-layer bias-free MSE, any class counts.
pub fn predict_imbalanced_plain(spec: &ProblemSpec) -> Result<TheoryPrediction, TheoryError> {
    if spec.depth() != 1 {
        return Err(TheoryError::WrongRegime(format!(
            "plain prediction needs one layer, got {}",
            spec.depth()
        )));
    }
    predict_imbalanced(spec)
}

/// Deep (`M ≥ 2`) bias-free MSE, any class counts.
pub fn predict_imbalanced_deep(spec: &ProblemSpec) -> Result<TheoryPrediction, TheoryError> {
    if spec.depth() < 2 {
        return Err(TheoryError::WrongRegime(
            "deep prediction needs at least two layers".into(),
        ));
    }
    predict_imbalanced(spec)
}

/// Balanced cross-entropy: the end-to-end Gram, the class-mean Gram and
/// their product are simplex ETFs of unknown scale and the bias is constant.
pub fn predict_ce_balanced(spec: &ProblemSpec) -> Result<TheoryPrediction, TheoryError> {
    if spec.loss() != LossKind::CrossEntropy {
        return Err(TheoryError::WrongRegime("expected the CE loss".into()));
    }
    if !spec.is_balanced() {
        return Err(TheoryError::WrongRegime(
            "CE prediction needs equal class counts".into(),
        ));
    }
    let k = spec.num_classes();
    if min_width(spec) < k - 1 {
        return Err(TheoryError::Unsupported(format!(
            "CE prediction needs every width >= {}",
            k - 1
        )));
    }
    let etf = centering(k);
    Ok(TheoryPrediction {
        regime: Regime::AllActive,
        geometry: Geometry::Etf,
        loss: LossKind::CrossEntropy,
        has_bias: spec.bias_mode().has_bias(),
        depth: spec.depth(),
        num_classes: k,
        a: None,
        c: None,
        threshold: None,
        class_b: Vec::new(),
        x_star: Vec::new(),
        singular_values: Vec::new(),
        product_singular_values: Vec::new(),
        rank_cap: k - 1,
        active_rank: k - 1,
        bottleneck_block: None,
        target_w_gram: etf.clone(),
        target_h_gram: etf.clone(),
        target_wh: etf.clone(),
        target_product_gram: etf,
        predicted_loss: None,
        bias: if spec.bias_mode().has_bias() {
            BiasPrediction::Constant
        } else {
            BiasPrediction::None
        },
        duality: Vec::new(),
    })
}

/// Routes a spec to the predictor that covers it.
pub fn predict(spec: &ProblemSpec) -> Result<TheoryPrediction, TheoryError> {
    match (spec.loss(), spec.bias_mode()) {
        (LossKind::CrossEntropy, _) => predict_ce_balanced(spec),
        (LossKind::Mse, BiasMode::LastLayerRegularized(_)) => Err(TheoryError::Unsupported(
            "no closed form with a regularised bias".into(),
        )),
        (LossKind::Mse, BiasMode::LastLayerUnregularized) => {
            if spec.is_balanced() {
                predict_balanced(spec)
            } else {
                Err(TheoryError::Unsupported(
                    "imbalanced closed form is only known without bias".into(),
                ))
            }
        }
        (LossKind::Mse, BiasMode::None) => {
            if spec.is_balanced() {
                predict_balanced(spec)
            } else if spec.depth() == 1 {
                predict_imbalanced_plain(spec)
            } else {
                predict_imbalanced_deep(spec)
            }
        }
    }
}

/// Flags classes whose optimal classifier and features are exactly zero in
/// the single-layer model: `N²λ_Wλ_H / n_k > 1`.
pub fn minority_collapse_threshold(spec: &ProblemSpec) -> Result<Vec<bool>, TheoryError> {
    require_mse(spec)?;
    if spec.depth() != 1 {
        return Err(TheoryError::WrongRegime(
            "minority collapse threshold is for one layer".into(),
        ));
    }
    let a = a_constant(spec);
    Ok(spec
        .class_counts()
        .iter()
        .map(|&n| a / n as f64 > 1.0)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormRatios {
    /// `[i][j] = ‖w_i‖² / ‖w_j‖²`.
    pub classifier: Vec<Vec<f64>>,
    /// `[i][j] = ‖h_i‖² / ‖h_j‖²`.
    pub feature: Vec<Vec<f64>>,
}

/// Pairwise squared-norm ratios of optimal classifiers and class means in the
/// single-layer model.
pub fn norm_ratios(spec: &ProblemSpec) -> Result<NormRatios, TheoryError> {
    require_mse(spec)?;
    require_positive_lambdas(spec)?;
    if spec.depth() != 1 {
        return Err(TheoryError::WrongRegime("norm ratios are for one layer".into()));
    }
    let lw = spec.lambda_w()[0];
    let lh = spec.lambda_h();
    let n_total = spec.total_samples() as f64;
    let counts = spec.class_counts();
    let s2: Vec<f64> = counts
        .iter()
        .map(|&n| (n as f64 * lh / lw).sqrt() - n_total * lh)
        .collect();
    if s2.iter().any(|&v| v <= 0.0) {
        return Err(TheoryError::WrongRegime(
            "norm ratios need every class active".into(),
        ));
    }
    let k = counts.len();
    let classifier: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| s2[i] / s2[j]).collect())
        .collect();
    let feature = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| classifier[i][j] * counts[j] as f64 / counts[i] as f64)
                .collect()
        })
        .collect();
    Ok(NormRatios {
        classifier,
        feature,
    })
}

/// Builds an explicit global minimizer matching `pred`.
///
/// Layer factors are seeded random orthonormal frames; `W_j` carries
/// singular values `√(λ_{W_1}/λ_{W_j})·s_k`, and the features are the exact
/// stationary solve for those weights.
pub fn construct_canonical_minimizer(
    spec: &ProblemSpec,
    pred: &TheoryPrediction,
    seed: u64,
    branch: TieBranch,
) -> Result<NetworkState, TheoryError> {
    if pred.loss != LossKind::Mse || pred.singular_values.is_empty() {
        return Err(TheoryError::Unsupported(
            "construction needs an MSE prediction with known singular values".into(),
        ));
    }
    if pred.num_classes != spec.num_classes()
        || pred.depth != spec.depth()
        || pred.has_bias != spec.bias_mode().has_bias()
    {
        return Err(TheoryError::WrongRegime(
            "prediction does not belong to this spec".into(),
        ));
    }
    let k = spec.num_classes();
    let depth = spec.depth();
    let mut s = pred.singular_values.clone();
    if branch == TieBranch::Trivial {
        if let Regime::ThresholdTie(idx) = &pred.regime {
            for &i in idx {
                s[i] = 0.0;
            }
        }
    }
    let active: Vec<usize> = (0..k).filter(|&i| s[i] > 0.0).collect();
    let r = active.len();
    let d: Vec<f64> = active.iter().map(|&i| s[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<DenseMatrix> = spec
        .widths()
        .iter()
        .map(|&w| random_orthonormal(w, r, &mut rng))
        .collect();
    let outer = match pred.geometry {
        Geometry::Of => random_orthonormal(k, r, &mut rng),
        Geometry::Etf => random_centered_orthonormal(k, r, &mut rng),
        Geometry::Gof | Geometry::Zero => {
            DenseMatrix::from_fn(k, r, |row, col| if active[col] == row { 1.0 } else { 0.0 })
        }
    };

    let lw = spec.lambda_w();
    let mut weights = Vec::with_capacity(depth);
    for j in 0..depth {
        let left = if j + 1 == depth { &outer } else { &frames[j + 1] };
        let scale = (lw[0] / lw[j]).sqrt();
        let w = left.scale_columns(&d).matmul_t(&frames[j]).scale(scale);
        weights.push(w);
    }
    let bias = spec.bias_mode().has_bias().then(|| vec![1.0 / k as f64; k]);
    let features = optimal_features_given_weights(&weights, bias.as_deref(), spec)?;
    Ok(NetworkState {
        weights,
        features,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{balance_residuals, gradient, loss};

    fn mse_spec(counts: Vec<usize>, depth: usize, width: usize, lambda: f64) -> ProblemSpec {
        ProblemSpec::new(
            counts,
            vec![width; depth],
            LossKind::Mse,
            BiasMode::None,
            vec![lambda; depth],
            lambda,
        )
        .unwrap()
    }

    #[test]
    fn threshold_values() {
        assert!((g_threshold(3).unwrap() - 4f64.cbrt() / 3.0).abs() < 1e-15);
        assert!((g_threshold(3).unwrap() - 0.52913).abs() < 1e-5);
        assert!((g_threshold(2).unwrap() - 0.5).abs() < 1e-15);
        // The threshold on b rises with depth; the one on a = b/M falls.
        for m in 2..9 {
            assert!(g_threshold(m + 1).unwrap() > g_threshold(m).unwrap());
            let a_next = g_threshold(m + 1).unwrap() / (m + 1) as f64;
            assert!(a_next < g_threshold(m).unwrap() / m as f64);
        }
        assert!(g_threshold(1).is_err());
    }

    #[test]
    fn tie_at_depth_three() {
        let case = g_minimize(3, 4f64.cbrt() / 3.0).unwrap();
        match case.kind {
            GMinimizerKind::Tie(x) => assert!((x - 2f64.cbrt()).abs() < 1e-15),
            other => panic!("expected a tie, got {other:?}"),
        }
        assert!((g_value(3, case.b, 2f64.cbrt()) - 1.0).abs() < 1e-12);
        assert_eq!(g_minimize(3, 0.6).unwrap().kind, GMinimizerKind::ZeroOnly);
    }

    #[test]
    fn nontrivial_root_beats_grid() {
        let case = g_minimize(2, 0.3).unwrap();
        let x = case.x_star().unwrap();
        assert!(x > 1.0);
        assert!(g_derivative(2, 0.3, x).abs() < 1e-10);
        let grid_min = (0..=100_000)
            .map(|i| g_value(2, 0.3, i as f64 * 1e-4))
            .fold(f64::INFINITY, f64::min);
        assert!(g_value(2, 0.3, x) <= grid_min + 1e-12);
    }

    #[test]
    fn plain_cases() {
        assert_eq!(
            plain_minimize(0.25).unwrap().kind,
            GMinimizerKind::NontrivialOnly(1.0)
        );
        let tie = plain_minimize(1.0).unwrap();
        assert_eq!(tie.kind, GMinimizerKind::Tie(0.0));
        assert_eq!(tie.min_value(), 1.0);
        assert_eq!(plain_minimize(2.0).unwrap().kind, GMinimizerKind::ZeroOnly);
        assert!(plain_minimize(0.0).is_err());
    }

    #[test]
    fn balanced_depth_three_is_nontrivial() {
        let spec = mse_spec(vec![100; 4], 3, 64, 5e-4);
        let pred = predict_balanced(&spec).unwrap();
        let thm_a = pred.a.unwrap() / 100.0;
        assert!((thm_a - 4.0 * (400.0 * 5e-4f64.powi(4)).cbrt()).abs() < 1e-15);
        assert!((thm_a - 1.170e-3).abs() < 1e-6);
        assert_eq!(pred.regime, Regime::AllActive);
        assert_eq!(pred.geometry, Geometry::Of);
        let s = pred.singular_values[0];
        assert!(pred.singular_values.iter().all(|&v| (v - s).abs() < 1e-15));
        let g = pred.predicted_loss.unwrap() * 2.0;
        assert!(g < 1.0);
    }

    #[test]
    fn balanced_above_threshold_collapses() {
        let spec = mse_spec(vec![2; 3], 3, 4, 0.5);
        let pred = predict_balanced(&spec).unwrap();
        assert_eq!(pred.regime, Regime::FullCollapse);
        assert_eq!(pred.geometry, Geometry::Zero);
        assert_eq!(pred.predicted_loss, Some(0.5));
        assert!(pred.singular_values.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn plain_imbalanced_closed_form() {
        let spec = mse_spec(vec![200, 100, 50, 50], 1, 64, 5e-4);
        let pred = predict_imbalanced_plain(&spec).unwrap();
        assert!((pred.a.unwrap() - 0.04).abs() < 1e-15);
        let expect = (200f64.sqrt() - 0.2).sqrt();
        assert!((pred.singular_values[0] - expect).abs() < 1e-12);
        assert!((pred.singular_values[0] - 3.7339).abs() < 1e-4);
        assert_eq!(pred.geometry, Geometry::Gof);
    }

    #[test]
    fn deep_matches_balanced_on_balanced_spec() {
        let spec = mse_spec(vec![30; 3], 3, 8, 1e-3);
        let deep = predict_imbalanced_deep(&spec).unwrap();
        let bal = predict_balanced(&spec).unwrap();
        for (x, y) in deep.singular_values.iter().zip(&bal.singular_values) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!((deep.predicted_loss.unwrap() - bal.predicted_loss.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn minority_collapse_flags() {
        let spec = mse_spec(vec![2000, 495, 495, 10], 1, 16, 2e-3);
        assert!((a_constant(&spec) - 36.0).abs() < 1e-9);
        assert_eq!(
            minority_collapse_threshold(&spec).unwrap(),
            vec![false, false, false, true]
        );
        let spec = mse_spec(vec![5, 5], 1, 4, 1.0);
        assert_eq!(minority_collapse_threshold(&spec).unwrap(), vec![true, true]);
    }

    #[test]
    fn norm_ratio_values() {
        let spec = mse_spec(vec![200, 100, 50, 50], 1, 64, 5e-4);
        let r = norm_ratios(&spec).unwrap();
        let expect = (200f64.sqrt() - 0.2) / (100f64.sqrt() - 0.2);
        assert!((r.classifier[0][1] - expect).abs() < 1e-12);
        assert!((r.classifier[0][1] - 1.4227).abs() < 1e-4);
        assert_eq!(r.classifier[2][3], 1.0);
        assert!(r.feature[0][1] <= 1.0);
    }

    #[test]
    fn construction_is_a_critical_point() {
        for (counts, depth, bias) in [
            (vec![10; 4], 3, BiasMode::None),
            (vec![10; 4], 2, BiasMode::LastLayerUnregularized),
            (vec![12, 6, 3], 2, BiasMode::None),
            (vec![12, 6, 3], 1, BiasMode::None),
        ] {
            let spec = ProblemSpec::new(
                counts,
                vec![6; depth],
                LossKind::Mse,
                bias,
                vec![5e-3; depth],
                5e-3,
            )
            .unwrap();
            let pred = predict(&spec).unwrap();
            let state = construct_canonical_minimizer(&spec, &pred, 7, TieBranch::Nontrivial)
                .unwrap();
            let l = loss(&state, &spec).unwrap();
            assert!((l - pred.predicted_loss.unwrap()).abs() < 1e-10, "{l} vs {pred:?}");
            assert!(gradient(&state, &spec).unwrap().norm() < 1e-8);
            assert!(balance_residuals(&state, &spec)
                .unwrap()
                .iter()
                .all(|&r| r < 1e-8));
        }
    }
}
