//! The unconstrained-features objective for an `M`-layer linear head.
//!
//! Shapes: `H₁` is `d₁ × N` with columns grouped by class (class 0 first),
//! `W_m` maps `d_m → d_{m+1}` for `m < M`, and `W_M` maps `d_M → K`. The
//! network output is `Z = W_M ⋯ W₁ H₁ (+ b 1ᵀ)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky_solve, gaussian_matrix, DenseMatrix, LinalgError};

/// Standard deviation of the Gaussian initialisation.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid problem specification: {0}")]
    InvalidSpec(String),
    #[error("shape contract violated: {0}")]
    Shape(String),
    #[error("objective is not finite ({value})")]
    NumericalOverflow { value: f64 },
    #[error("operation is only defined for the MSE loss")]
    UnsupportedLoss,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "ce")]
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BiasMode {
    None,
    /// Last-layer bias without weight decay.
    LastLayerUnregularized,
    /// Last-layer bias with weight decay `λ_b`.
    LastLayerRegularized(f64),
}

impl BiasMode {
    pub fn has_bias(self) -> bool {
        !matches!(self, BiasMode::None)
    }
}

/// Problem dimensions, losses and regularisation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    class_counts: Vec<usize>,
    widths: Vec<usize>,
    loss: LossKind,
    bias: BiasMode,
    lambda_w: Vec<f64>,
    lambda_h: f64,
}

impl ProblemSpec {
    /// `class_counts` must be non-increasing and positive; `widths` are
    /// `d₁..d_M`; `lambda_w` are `λ_{W₁}..λ_{W_M}`.
    ///
    /// Regularisation weights must be finite and nonnegative here. Operations
    /// that need strictly positive weights (the closed-form optima, the
    /// feature solve) check for themselves.
    pub fn new(
        class_counts: Vec<usize>,
        widths: Vec<usize>,
        loss: LossKind,
        bias: BiasMode,
        lambda_w: Vec<f64>,
        lambda_h: f64,
    ) -> Result<Self, ModelError> {
        if class_counts.len() < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                class_counts.len()
            )));
        }
        if class_counts.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "every class needs at least one sample".into(),
            ));
        }
        if class_counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(ModelError::InvalidSpec(format!(
                "class counts must be non-increasing, got {class_counts:?}"
            )));
        }
        if widths.is_empty() || widths.contains(&0) {
            return Err(ModelError::InvalidSpec(format!(
                "need at least one layer and all widths >= 1, got {widths:?}"
            )));
        }
        if lambda_w.len() != widths.len() {
            return Err(ModelError::InvalidSpec(format!(
                "expected {} weight-decay values, got {}",
                widths.len(),
                lambda_w.len()
            )));
        }
        let check = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ModelError::InvalidSpec(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )))
            }
        };
        for (m, &l) in lambda_w.iter().enumerate() {
            check(&format!("lambda_w[{m}]"), l)?;
        }
        check("lambda_h", lambda_h)?;
        if let BiasMode::LastLayerRegularized(lb) = bias {
            check("lambda_b", lb)?;
        }
        Ok(Self {
            class_counts,
            widths,
            loss,
            bias,
            lambda_w,
            lambda_h,
        })
    }

    /// Balanced problem with `n` samples per class, `depth` layers of width
    /// `width` and a single weight decay for everything.
    pub fn uniform(
        num_classes: usize,
        n: usize,
        depth: usize,
        width: usize,
        lambda: f64,
        loss: LossKind,
        bias: BiasMode,
    ) -> Result<Self, ModelError> {
        Self::new(
            vec![n; num_classes],
            vec![width; depth],
            loss,
            bias,
            vec![lambda; depth],
            lambda,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn total_samples(&self) -> usize {
        self.class_counts.iter().sum()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn bias_mode(&self) -> BiasMode {
        self.bias
    }

    /// `λ_{W₁}..λ_{W_M}`.
    pub fn lambda_w(&self) -> &[f64] {
        &self.lambda_w
    }

    pub fn lambda_h(&self) -> f64 {
        self.lambda_h
    }

    pub fn lambda_b(&self) -> Option<f64> {
        match self.bias {
            BiasMode::LastLayerRegularized(l) => Some(l),
            _ => None,
        }
    }

    pub fn is_balanced(&self) -> bool {
        self.class_counts.windows(2).all(|w| w[0] == w[1])
    }

    /// Shape `(rows, cols)` of `W_{m+1}` for 0-based `m`.
    pub fn weight_shape(&self, m: usize) -> (usize, usize) {
        let rows = if m + 1 == self.depth() {
            self.num_classes()
        } else {
            self.widths[m + 1]
        };
        (rows, self.widths[m])
    }

    /// Class label of every sample column.
    pub fn labels(&self) -> Vec<usize> {
        self.class_counts
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
            .collect()
    }

    /// Column range of each class block.
    pub fn class_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.class_counts
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    /// Same problem with a different loss/bias combination.
    pub fn with_objective(&self, loss: LossKind, bias: BiasMode) -> Result<Self, ModelError> {
        Self::new(
            self.class_counts.clone(),
            self.widths.clone(),
            loss,
            bias,
            self.lambda_w.clone(),
            self.lambda_h,
        )
    }
}

/// One-hot `K × N` target with contiguous class blocks.
pub fn target_matrix(spec: &ProblemSpec) -> DenseMatrix {
    let labels = spec.labels();
    let mut y = DenseMatrix::zeros(spec.num_classes(), labels.len());
    for (j, &k) in labels.iter().enumerate() {
        y[(k, j)] = 1.0;
    }
    y
}

/// Parameters `(W₁..W_M, H₁, b)`. Also used for gradients of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    /// `weights[0]` is `W₁`.
    pub weights: Vec<DenseMatrix>,
    pub features: DenseMatrix,
    pub bias: Option<Vec<f64>>,
}

impl NetworkState {
    pub fn zeros(spec: &ProblemSpec) -> Self {
        Self {
            weights: (0..spec.depth())
                .map(|m| {
                    let (r, c) = spec.weight_shape(m);
                    DenseMatrix::zeros(r, c)
                })
                .collect(),
            features: DenseMatrix::zeros(spec.widths()[0], spec.total_samples()),
            bias: spec
                .bias_mode()
                .has_bias()
                .then(|| vec![0.0; spec.num_classes()]),
        }
    }

    pub fn validate(&self, spec: &ProblemSpec) -> Result<(), ModelError> {
        if self.weights.len() != spec.depth() {
            return Err(ModelError::Shape(format!(
                "expected {} weight matrices, got {}",
                spec.depth(),
                self.weights.len()
            )));
        }
        for (m, w) in self.weights.iter().enumerate() {
            let want = spec.weight_shape(m);
            if w.shape() != want {
                return Err(ModelError::Shape(format!(
                    "W{} has shape {:?}, expected {:?}",
                    m + 1,
                    w.shape(),
                    want
                )));
            }
        }
        let want = (spec.widths()[0], spec.total_samples());
        if self.features.shape() != want {
            return Err(ModelError::Shape(format!(
                "H1 has shape {:?}, expected {:?}",
                self.features.shape(),
                want
            )));
        }
        match (&self.bias, spec.bias_mode().has_bias()) {
            (Some(b), true) if b.len() == spec.num_classes() => Ok(()),
            (Some(b), true) => Err(ModelError::Shape(format!(
                "bias has length {}, expected {}",
                b.len(),
                spec.num_classes()
            ))),
            (None, false) => Ok(()),
            (Some(_), false) => Err(ModelError::Shape(
                "bias present but the problem has no bias".into(),
            )),
            (None, true) => Err(ModelError::Shape("bias missing".into())),
        }
    }

    /// Sum of squared entries over every block.
    pub fn norm_sq(&self) -> f64 {
        self.weights.iter().map(DenseMatrix::frobenius_norm_sq).sum::<f64>()
            + self.features.frobenius_norm_sq()
            + self
                .bias
                .as_ref()
                .map_or(0.0, |b| b.iter().map(|x| x * x).sum())
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha · other`; shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &NetworkState) {
        for (w, g) in self.weights.iter_mut().zip(&other.weights) {
            w.axpy(alpha, g);
        }
        self.features.axpy(alpha, &other.features);
        if let (Some(b), Some(g)) = (self.bias.as_mut(), other.bias.as_ref()) {
            b.iter_mut().zip(g).for_each(|(x, y)| *x += alpha * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(DenseMatrix::is_finite)
            && self.features.is_finite()
            && self
                .bias
                .as_ref()
                .is_none_or(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Flattened view of all parameters in a fixed order (W₁..W_M, H₁, b).
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for w in &self.weights {
            out.extend_from_slice(w.data());
        }
        out.extend_from_slice(self.features.data());
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
        out
    }

    /// Mutable reference to the `idx`-th parameter in [`flat_values`] order.
    ///
    /// [`flat_values`]: NetworkState::flat_values
    pub fn flat_entry_mut(&mut self, mut idx: usize) -> &mut f64 {
        for w in &mut self.weights {
            let len = w.data().len();
            if idx < len {
                return &mut w.data_mut()[idx];
            }
            idx -= len;
        }
        let len = self.features.data().len();
        if idx < len {
            return &mut self.features.data_mut()[idx];
        }
        idx -= len;
        &mut self.bias.as_mut().expect("index out of range")[idx]
    }
}

/// Seeded initialisation: every weight and feature entry is `0.1 · N(0, 1)`,
/// drawn in the order `W₁, …, W_M, H₁` (row-major within each matrix) from a
/// ChaCha8 stream seeded with `seed`. The bias starts at zero.
pub fn init_state(spec: &ProblemSpec, seed: u64) -> NetworkState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..spec.depth())
        .map(|m| {
            let (r, c) = spec.weight_shape(m);
            gaussian_matrix(r, c, &mut rng).scale(INIT_SCALE)
        })
        .collect();
    let features =
        gaussian_matrix(spec.widths()[0], spec.total_samples(), &mut rng).scale(INIT_SCALE);
    NetworkState {
        weights,
        features,
        bias: spec
            .bias_mode()
            .has_bias()
            .then(|| vec![0.0; spec.num_classes()]),
    }
}

/// `W_M ⋯ W₁` (`K × d₁`), accumulated from the narrow side.
pub fn end_to_end(weights: &[DenseMatrix]) -> DenseMatrix {
    let mut iter = weights.iter().rev();
    let mut p = iter.next().expect("at least one layer").clone();
    for w in iter {
        p = p.matmul(w);
    }
    p
}

/// `[W¹, …, W^M]` with `W^m = W_M ⋯ W_{M−m+1}`.
pub fn trailing_products(weights: &[DenseMatrix]) -> Vec<DenseMatrix> {
    let mut out: Vec<DenseMatrix> = Vec::with_capacity(weights.len());
    for w in weights.iter().rev() {
        let next = match out.last() {
            Some(prev) => prev.matmul(w),
            None => w.clone(),
        };
        out.push(next);
    }
    out
}

/// `Z = W_M ⋯ W₁ H₁ (+ b 1ᵀ)`.
pub fn forward(state: &NetworkState, spec: &ProblemSpec) -> Result<DenseMatrix, ModelError> {
    state.validate(spec)?;
    Ok(logits(state, &end_to_end(&state.weights)))
}

fn logits(state: &NetworkState, product: &DenseMatrix) -> DenseMatrix {
    let mut z = product.matmul(&state.features);
    if let Some(b) = &state.bias {
        for (k, &bk) in b.iter().enumerate() {
            z.row_mut(k).iter_mut().for_each(|v| *v += bk);
        }
    }
    z
}

fn regularization(state: &NetworkState, spec: &ProblemSpec) -> f64 {
    let mut r = 0.0;
    for (w, &l) in state.weights.iter().zip(spec.lambda_w()) {
        r += 0.5 * l * w.frobenius_norm_sq();
    }
    r += 0.5 * spec.lambda_h() * state.features.frobenius_norm_sq();
    if let (Some(lb), Some(b)) = (spec.lambda_b(), &state.bias) {
        r += 0.5 * lb * b.iter().map(|x| x * x).sum::<f64>();
    }
    r
}

/// Data term and its residual `∂(data)/∂Z` (already scaled by `1/N`).
fn data_term(z: &DenseMatrix, labels: &[usize], loss: LossKind) -> (f64, DenseMatrix) {
    let k = z.rows();
    let n = z.cols();
    let inv_n = 1.0 / n as f64;
    let mut resid = z.clone();
    let value = match loss {
        LossKind::Mse => {
            for (j, &y) in labels.iter().enumerate() {
                resid[(y, j)] -= 1.0;
            }
            let v = 0.5 * inv_n * resid.frobenius_norm_sq();
            resid.scale_in_place(inv_n);
            v
        }
        LossKind::CrossEntropy => {
            let mut total = 0.0;
            let mut col = vec![0.0; k];
            for (j, &y) in labels.iter().enumerate() {
                for (i, c) in col.iter_mut().enumerate() {
                    *c = z[(i, j)];
                }
                let lse = log_sum_exp(&col);
                total += lse - col[y];
                for (i, &c) in col.iter().enumerate() {
                    resid[(i, j)] = (c - lse).exp() * inv_n;
                }
                resid[(y, j)] -= inv_n;
            }
            total * inv_n
        }
    };
    (value, resid)
}

/// `log Σ exp(v_i)`, shifted by the maximum.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// The data term alone (no regularisation) for given logits.
pub fn data_loss(z: &DenseMatrix, spec: &ProblemSpec) -> f64 {
    data_term(z, &spec.labels(), spec.loss()).0
}

pub fn loss(state: &NetworkState, spec: &ProblemSpec) -> Result<f64, ModelError> {
    let z = forward(state, spec)?;
    let v = data_loss(&z, spec) + regularization(state, spec);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NumericalOverflow { value: v })
    }
}

pub fn gradient(state: &NetworkState, spec: &ProblemSpec) -> Result<NetworkState, ModelError> {
    loss_and_gradient(state, spec).map(|(_, g)| g)
}

/// Objective value and full gradient in one pass.
///
/// With `R = ∂(data)/∂Z`, `L_m = W_M ⋯ W_{m+1}` and `B_m = W_{m−1} ⋯ W₁ H₁`,
/// the weight gradient is `L_mᵀ (R B_mᵀ) + λ_m W_m`. Every intermediate is
/// kept `K`-rows tall, so a step costs `O(K·Σd_m² + K·d₁·N)`.
pub fn loss_and_gradient(
    state: &NetworkState,
    spec: &ProblemSpec,
) -> Result<(f64, NetworkState), ModelError> {
    state.validate(spec)?;
    let depth = spec.depth();
    let w = &state.weights;

    // lefts[m] = W_M ⋯ W_{m+2} (0-based m); None stands for I_K at the top.
    let mut lefts: Vec<Option<DenseMatrix>> = vec![None; depth];
    for m in (0..depth - 1).rev() {
        lefts[m] = Some(match &lefts[m + 1] {
            Some(l) => l.matmul(&w[m + 1]),
            None => w[m + 1].clone(),
        });
    }
    let product = match &lefts[0] {
        Some(l) => l.matmul(&w[0]),
        None => w[0].clone(),
    };

    let z = logits(state, &product);
    let (data, resid) = data_term(&z, &spec.labels(), spec.loss());
    let value = data + regularization(state, spec);
    if !value.is_finite() {
        return Err(ModelError::NumericalOverflow { value });
    }

    let mut grads = Vec::with_capacity(depth);
    // right = R (W_{m} ⋯ W₁ H₁)ᵀ, advanced one layer at a time
    let mut right = resid.matmul_t(&state.features);
    for m in 0..depth {
        let mut g = match &lefts[m] {
            Some(l) => l.t_matmul(&right),
            None => right.clone(),
        };
        g.axpy(spec.lambda_w()[m], &w[m]);
        if m + 1 < depth {
            right = right.matmul_t(&w[m]);
        }
        grads.push(g);
    }

    let mut gh = product.t_matmul(&resid);
    gh.axpy(spec.lambda_h(), &state.features);

    let gb = state.bias.as_ref().map(|b| {
        let mut g: Vec<f64> = (0..resid.rows())
            .map(|k| resid.row(k).iter().sum())
            .collect();
        if let Some(lb) = spec.lambda_b() {
            g.iter_mut().zip(b).for_each(|(gi, bi)| *gi += lb * bi);
        }
        g
    });

    Ok((
        value,
        NetworkState {
            weights: grads,
            features: gh,
            bias: gb,
        },
    ))
}

/// Feature matrix that zeroes `∂f/∂H₁` for fixed weights (and bias):
/// `H₁ = (PᵀP + Nλ_H I)⁻¹ Pᵀ (Y − b1ᵀ)` with `P = W_M ⋯ W₁`.
///
/// Solved in the equivalent `K × K` form `Pᵀ (PPᵀ + Nλ_H I)⁻¹ (Y − b1ᵀ)`.
pub fn optimal_features_given_weights(
    weights: &[DenseMatrix],
    bias: Option<&[f64]>,
    spec: &ProblemSpec,
) -> Result<DenseMatrix, ModelError> {
    if spec.loss() != LossKind::Mse {
        return Err(ModelError::UnsupportedLoss);
    }
    if !(spec.lambda_h() > 0.0) {
        return Err(ModelError::InvalidSpec(
            "feature solve needs lambda_h > 0".into(),
        ));
    }
    if weights.len() != spec.depth() {
        return Err(ModelError::Shape(format!(
            "expected {} weight matrices, got {}",
            spec.depth(),
            weights.len()
        )));
    }
    for (m, w) in weights.iter().enumerate() {
        if w.shape() != spec.weight_shape(m) {
            return Err(ModelError::Shape(format!(
                "W{} has shape {:?}, expected {:?}",
                m + 1,
                w.shape(),
                spec.weight_shape(m)
            )));
        }
    }
    let k = spec.num_classes();
    let n = spec.total_samples() as f64;
    let p = end_to_end(weights);
    let mut system = p.gram_rows();
    for i in 0..k {
        system[(i, i)] += n * spec.lambda_h();
    }
    let mut target = target_matrix(spec);
    if let Some(b) = bias {
        if b.len() != k {
            return Err(ModelError::Shape(format!(
                "bias has length {}, expected {k}",
                b.len()
            )));
        }
        for (i, &bi) in b.iter().enumerate() {
            target.row_mut(i).iter_mut().for_each(|v| *v -= bi);
        }
    }
    let x = cholesky_solve(&system, &target)?;
    Ok(p.t_matmul(&x))
}

/// Residuals of the critical-point balance relations:
/// entry `m` (`m < M`) is `‖λ_{m+1} W_{m+1}ᵀW_{m+1} − λ_m W_m W_mᵀ‖_F` and the
/// last is `‖λ_{W₁} W₁ᵀW₁ − λ_H H₁H₁ᵀ‖_F`.
pub fn balance_residuals(state: &NetworkState, spec: &ProblemSpec) -> Result<Vec<f64>, ModelError> {
    state.validate(spec)?;
    let lw = spec.lambda_w();
    let w = &state.weights;
    let mut out = Vec::with_capacity(spec.depth());
    for m in 0..spec.depth() - 1 {
        let upper = w[m + 1].gram_cols().scale(lw[m + 1]);
        let lower = w[m].gram_rows().scale(lw[m]);
        out.push(upper.sub(&lower).frobenius_norm());
    }
    let first = w[0].gram_cols().scale(lw[0]);
    let feats = state.features.gram_rows().scale(spec.lambda_h());
    out.push(first.sub(&feats).frobenius_norm());
    Ok(out)
}
