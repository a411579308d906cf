//! Neural-collapse measurements and the trained-versus-theory comparison.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{centering, norm2, pseudo_inverse, singular_values, DenseMatrix, LinalgError};
use crate::model::{
    balance_residuals, end_to_end, loss, trailing_products, LossKind, ModelError, NetworkState,
    ProblemSpec,
};
use crate::theory::{BiasPrediction, Geometry, TheoryPrediction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("prediction does not match the problem: {0}")]
    RegimeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Of,
    Etf,
    Gof,
}

impl Flavor {
    pub fn from_geometry(g: Geometry) -> Self {
        match g {
            Geometry::Of | Geometry::Zero => Flavor::Of,
            Geometry::Etf => Flavor::Etf,
            Geometry::Gof => Flavor::Gof,
        }
    }
}

/// Class means `H̄` (`d × K`) and the global mean `h_G`.
pub fn class_means(h: &DenseMatrix, spec: &ProblemSpec) -> Result<(DenseMatrix, Vec<f64>), MetricsError> {
    if h.cols() != spec.total_samples() {
        return Err(MetricsError::InvalidArgument(format!(
            "feature matrix has {} columns, expected {}",
            h.cols(),
            spec.total_samples()
        )));
    }
    let d = h.rows();
    let ranges = spec.class_ranges();
    let mut means = DenseMatrix::zeros(d, ranges.len());
    for i in 0..d {
        let row = h.row(i);
        for (k, r) in ranges.iter().enumerate() {
            means[(i, k)] = row[r.clone()].iter().sum::<f64>() / r.len() as f64;
        }
    }
    let n = spec.total_samples() as f64;
    let global = (0..d)
        .map(|i| h.row(i).iter().sum::<f64>() / n)
        .collect();
    Ok((means, global))
}

/// `(1/K)·tr(Σ_W Σ_B†)`; `+∞` when all class means coincide.
///
/// With `M̃ = [h_k − h_G]`, `Σ_B = M̃M̃ᵀ/K` and `Σ_B† = K·(M̃†)ᵀM̃†`, so the
/// trace reduces to `‖M̃† (H − H̄_labels)‖²_F / N` without forming `d × d`
/// matrices. The cutoff on `M̃` mirrors the default cutoff on `Σ_B`.
pub fn nc1(h: &DenseMatrix, spec: &ProblemSpec) -> Result<f64, MetricsError> {
    let (means, global) = class_means(h, spec)?;
    let d = h.rows();
    let k = spec.num_classes();
    let between = DenseMatrix::from_fn(d, k, |i, j| means[(i, j)] - global[i]);
    if between.max_abs() == 0.0 {
        return Ok(f64::INFINITY);
    }
    let rcond = (d as f64 * f64::EPSILON).sqrt();
    let pinv = pseudo_inverse(&between, rcond)?;
    let mut within = h.clone();
    for (c, r) in spec.class_ranges().iter().enumerate() {
        for i in 0..d {
            let m = means[(i, c)];
            within.row_mut(i)[r.clone()].iter_mut().for_each(|v| *v -= m);
        }
    }
    let proj = pinv.matmul(&within);
    Ok(proj.frobenius_norm_sq() / spec.total_samples() as f64)
}

fn normalized(a: &DenseMatrix, what: &str) -> Result<DenseMatrix, MetricsError> {
    let n = a.frobenius_norm();
    if n == 0.0 || !n.is_finite() {
        return Err(MetricsError::Degenerate(format!("{what} is zero")));
    }
    Ok(a.scale(1.0 / n))
}

fn of_target(k: usize) -> DenseMatrix {
    DenseMatrix::identity(k).scale(1.0 / (k as f64).sqrt())
}

fn etf_target(k: usize) -> DenseMatrix {
    centering(k).scale(1.0 / (k as f64 - 1.0).sqrt())
}

fn gap_to(a: &DenseMatrix, target: &DenseMatrix, what: &str) -> Result<f64, MetricsError> {
    Ok(normalized(a, what)?.sub(target).frobenius_norm())
}

/// Distance between the sorted spectra of two normalised PSD matrices.
fn spectral_gap(a: &DenseMatrix, target: &DenseMatrix, what: &str) -> Result<f64, MetricsError> {
    let sa = singular_values(&normalized(a, what)?)?;
    let st = singular_values(&normalized(target, "target")?)?;
    Ok(sa
        .iter()
        .zip(&st)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// `‖W^m W^mᵀ/‖·‖_F − I/√K‖_F` for each trailing product `W^m`.
pub fn nc2_of(products: &[DenseMatrix], k: usize) -> Result<Vec<f64>, MetricsError> {
    let target = of_target(k);
    products
        .iter()
        .map(|p| gap_to(&p.gram_rows(), &target, "classifier Gram"))
        .collect()
}

/// As [`nc2_of`] with the simplex ETF target `(I − 11ᵀ/K)/√(K−1)`.
pub fn nc2_etf(products: &[DenseMatrix], k: usize) -> Result<Vec<f64>, MetricsError> {
    if k < 2 {
        return Err(MetricsError::InvalidArgument("ETF needs K >= 2".into()));
    }
    let target = etf_target(k);
    products
        .iter()
        .map(|p| gap_to(&p.gram_rows(), &target, "classifier Gram"))
        .collect()
}

/// `‖W_M⋯W₁H̄/‖·‖_F − T‖_F` with the OF or ETF target.
pub fn nc3(product: &DenseMatrix, means: &DenseMatrix, flavor: Flavor) -> Result<f64, MetricsError> {
    let k = product.rows();
    let target = match flavor {
        Flavor::Of => of_target(k),
        Flavor::Etf => etf_target(k),
        Flavor::Gof => {
            return Err(MetricsError::InvalidArgument(
                "GOF duality needs a prediction; use nc3_gof".into(),
            ))
        }
    };
    gap_to(&product.matmul(means), &target, "classifier-feature product")
}

fn check_prediction_scale(pred: &TheoryPrediction) -> Result<(), MetricsError> {
    if pred.target_product_gram.frobenius_norm() == 0.0 {
        return Err(MetricsError::Degenerate("prediction is the zero solution".into()));
    }
    Ok(())
}

/// End-to-end Gram against the predicted `diag(c·s_k^{2M})`, both normalised.
pub fn nc2_gof(product: &DenseMatrix, pred: &TheoryPrediction) -> Result<f64, MetricsError> {
    check_prediction_scale(pred)?;
    let gram = product.gram_rows();
    let target = &pred.target_product_gram;
    if pred.compare_spectra() {
        spectral_gap(&gram, target, "classifier Gram")
    } else {
        gap_to(&gram, &normalized(target, "target")?, "classifier Gram")
    }
}

/// `W_M⋯W₁H̄` against the predicted `diag(q_k/(q_k + Nλ_H))`, both normalised.
pub fn nc3_gof(
    product: &DenseMatrix,
    means: &DenseMatrix,
    pred: &TheoryPrediction,
) -> Result<f64, MetricsError> {
    check_prediction_scale(pred)?;
    let wh = product.matmul(means);
    let target = &pred.target_wh;
    if pred.compare_spectra() {
        spectral_gap(&wh, target, "classifier-feature product")
    } else {
        gap_to(&wh, &normalized(target, "target")?, "classifier-feature product")
    }
}

/// Deviations of a state from a theory prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryDeviation {
    pub loss: f64,
    pub predicted_loss: Option<f64>,
    pub loss_gap: Option<f64>,
    pub relative_loss_gap: Option<f64>,
    /// Singular values of `W_M⋯W₁`, descending, padded to `K`.
    pub product_singular_values: Vec<f64>,
    /// Relative error against the predicted values (absolute where the
    /// prediction is zero).
    pub singular_value_deviation: Vec<f64>,
    /// `‖(W_M⋯W₁)_k − κ_k h_k‖` per class.
    pub duality_residuals: Vec<f64>,
    /// Largest entrywise bias error (distance from a constant vector when
    /// only constancy is predicted).
    pub bias_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub flavor: Flavor,
    /// `+∞` (written as null) when all class means coincide.
    pub nc1: f64,
    /// One entry per trailing product (OF/ETF) or a single entry (GOF);
    /// `None` when the measured matrix is zero.
    pub nc2: Vec<Option<f64>>,
    pub nc3: Option<f64>,
    pub balance_residuals: Vec<f64>,
    /// Row norms of `W_M`.
    pub classifier_norms: Vec<f64>,
    /// Norms of the class means.
    pub feature_norms: Vec<f64>,
    pub theory: Option<TheoryDeviation>,
}

impl MetricReport {
    pub fn nc1_degenerate(&self) -> bool {
        !self.nc1.is_finite()
    }

    /// Largest of NC1, the NC2 entries and NC3, or `None` if any is degenerate.
    pub fn max_nc(&self) -> Option<f64> {
        let mut m = self.nc1;
        if !m.is_finite() {
            return None;
        }
        for v in self.nc2.iter().chain(std::iter::once(&self.nc3)) {
            m = m.max((*v)?);
        }
        Some(m)
    }

    pub fn balance_max(&self) -> f64 {
        self.balance_residuals.iter().cloned().fold(0.0, f64::max)
    }
}

fn lenient(r: Result<f64, MetricsError>) -> Result<Option<f64>, MetricsError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// NC metrics of `state` in the given flavor, without theory deviations.
/// Degenerate geometry is reported as `None`; GOF needs a prediction.
pub fn measure(
    state: &NetworkState,
    spec: &ProblemSpec,
    flavor: Flavor,
    pred: Option<&TheoryPrediction>,
) -> Result<MetricReport, MetricsError> {
    state.validate(spec)?;
    let k = spec.num_classes();
    let (means, _) = class_means(&state.features, spec)?;
    let products = trailing_products(&state.weights);
    let product = products.last().expect("at least one layer").clone();
    let spectral = pred.filter(|p| p.compare_spectra());

    let nc2 = match (flavor, spectral) {
        (Flavor::Gof, _) => {
            let p = pred.ok_or_else(|| {
                MetricsError::InvalidArgument("GOF flavor needs a prediction".into())
            })?;
            vec![lenient(nc2_gof(&product, p))?]
        }
        (_, Some(p)) => products
            .iter()
            .map(|w| lenient(spectral_gap(&w.gram_rows(), &p.target_product_gram, "classifier Gram")))
            .collect::<Result<_, _>>()?,
        (Flavor::Of, None) => products
            .iter()
            .map(|w| lenient(gap_to(&w.gram_rows(), &of_target(k), "classifier Gram")))
            .collect::<Result<_, _>>()?,
        (Flavor::Etf, None) => products
            .iter()
            .map(|w| lenient(gap_to(&w.gram_rows(), &etf_target(k), "classifier Gram")))
            .collect::<Result<_, _>>()?,
    };
    let nc3 = match (flavor, spectral) {
        (Flavor::Gof, _) => lenient(nc3_gof(&product, &means, pred.expect("checked above")))?,
        (_, Some(p)) => lenient(spectral_gap(
            &product.matmul(&means),
            &p.target_wh,
            "classifier-feature product",
        ))?,
        (f, None) => lenient(nc3(&product, &means, f))?,
    };

    let last = state.weights.last().expect("at least one layer");
    Ok(MetricReport {
        flavor,
        nc1: nc1(&state.features, spec)?,
        nc2,
        nc3,
        balance_residuals: balance_residuals(state, spec)?,
        classifier_norms: (0..k).map(|i| norm2(last.row(i))).collect(),
        feature_norms: (0..k).map(|i| norm2(&means.col(i))).collect(),
        theory: None,
    })
}

/// Like [`measure`] but any degenerate metric is an error.
pub fn measure_strict(
    state: &NetworkState,
    spec: &ProblemSpec,
    flavor: Flavor,
    pred: Option<&TheoryPrediction>,
) -> Result<MetricReport, MetricsError> {
    let report = measure(state, spec, flavor, pred)?;
    if report.nc1_degenerate() {
        return Err(MetricsError::Degenerate("all class means coincide".into()));
    }
    if report.max_nc().is_none() {
        return Err(MetricsError::Degenerate("classifier or features are zero".into()));
    }
    Ok(report)
}

/// Full report in the prediction's flavor, with loss, singular-value,
/// duality and bias deviations.
pub fn compare_to_theory(
    state: &NetworkState,
    spec: &ProblemSpec,
    pred: &TheoryPrediction,
) -> Result<MetricReport, MetricsError> {
    if pred.num_classes != spec.num_classes()
        || pred.depth != spec.depth()
        || pred.loss != spec.loss()
        || pred.has_bias != spec.bias_mode().has_bias()
    {
        return Err(MetricsError::RegimeMismatch(format!(
            "prediction for K={}, M={}, {:?}, bias={} applied to K={}, M={}, {:?}, bias={}",
            pred.num_classes,
            pred.depth,
            pred.loss,
            pred.has_bias,
            spec.num_classes(),
            spec.depth(),
            spec.loss(),
            spec.bias_mode().has_bias()
        )));
    }
    let mut report = measure(state, spec, Flavor::from_geometry(pred.geometry), Some(pred))?;
    let k = spec.num_classes();
    let product = end_to_end(&state.weights);
    let (means, _) = class_means(&state.features, spec)?;

    let value = loss(state, spec)?;
    let loss_gap = pred.predicted_loss.map(|p| (value - p).abs());
    let relative_loss_gap = pred
        .predicted_loss
        .and_then(|p| (p > 0.0).then(|| (value - p).abs() / p));

    let mut measured = singular_values(&product)?;
    measured.resize(k, 0.0);
    let mut predicted = pred.product_singular_values.clone();
    predicted.sort_by(|a, b| b.total_cmp(a));
    let singular_value_deviation = if predicted.is_empty() {
        Vec::new()
    } else {
        measured
            .iter()
            .zip(&predicted)
            .map(|(&m, &t)| if t > 0.0 { (m - t).abs() / t } else { m.abs() })
            .collect()
    };

    let duality_residuals = if spec.loss() == LossKind::Mse {
        pred.duality
            .iter()
            .enumerate()
            .map(|(i, &kappa)| {
                let h = means.col(i);
                let diff: Vec<f64> = product
                    .row(i)
                    .iter()
                    .zip(&h)
                    .map(|(w, h)| w - kappa * h)
                    .collect();
                norm2(&diff)
            })
            .collect()
    } else {
        Vec::new()
    };

    let bias_deviation = match (&pred.bias, &state.bias) {
        (BiasPrediction::Exact(t), Some(b)) => Some(
            t.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        ),
        (BiasPrediction::Constant, Some(b)) => {
            let mean = b.iter().sum::<f64>() / b.len() as f64;
            Some(b.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max))
        }
        _ => None,
    };

    report.theory = Some(TheoryDeviation {
        loss: value,
        predicted_loss: pred.predicted_loss,
        loss_gap,
        relative_loss_gap,
        product_singular_values: measured,
        singular_value_deviation,
        duality_residuals,
        bias_deviation,
    });
    Ok(report)
}
