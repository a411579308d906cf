//! Canonical frame geometries: simplex ETF, orthogonal and general orthogonal
//! frames, and seeded random orthonormal factors.

use rand::Rng;
use rand_distr::StandardNormal;

use super::matrix::DenseMatrix;
use super::svd::orthonormal_columns;
use super::LinalgError;

/// `I_K − (1/K) 1 1ᵀ`, the centring projector.
pub fn centering(k: usize) -> DenseMatrix {
    let inv = 1.0 / k as f64;
    DenseMatrix::from_fn(k, k, |i, j| if i == j { 1.0 - inv } else { -inv })
}

/// Gram matrix of the standard simplex ETF: `K/(K−1) (I − 11ᵀ/K)`.
pub fn etf_gram(k: usize) -> Result<DenseMatrix, LinalgError> {
    if k < 2 {
        return Err(LinalgError::InvalidArgument(format!(
            "simplex ETF needs K >= 2, got {k}"
        )));
    }
    Ok(centering(k).scale(k as f64 / (k as f64 - 1.0)))
}

/// The standard simplex ETF itself, `sqrt(K/(K−1)) (I − 11ᵀ/K)`.
pub fn simplex_etf(k: usize) -> Result<DenseMatrix, LinalgError> {
    if k < 2 {
        return Err(LinalgError::InvalidArgument(format!(
            "simplex ETF needs K >= 2, got {k}"
        )));
    }
    Ok(centering(k).scale((k as f64 / (k as f64 - 1.0)).sqrt()))
}

/// `NᵀN = diag(a_k²) / Σ a_j²` for the general orthogonal frame with lengths `a`.
pub fn gof_gram(a: &[f64]) -> Result<DenseMatrix, LinalgError> {
    if a.is_empty() {
        return Err(LinalgError::InvalidArgument("GOF needs at least one length".into()));
    }
    if let Some(bad) = a.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(LinalgError::InvalidArgument(format!(
            "GOF lengths must be positive and finite, got {bad}"
        )));
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    Ok(DenseMatrix::from_diag(
        &a.iter().map(|x| x * x / total).collect::<Vec<_>>(),
    ))
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `rows × cols` matrix with orthonormal columns, from the QR factor of a
/// Gaussian matrix.
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    assert!(rows >= cols, "need rows >= cols for orthonormal columns");
    orthonormal_columns(&gaussian_matrix(rows, cols, rng))
}

/// `K × r` orthonormal columns, all orthogonal to the all-ones vector
/// (`r ≤ K − 1`).
pub fn random_centered_orthonormal<R: Rng + ?Sized>(k: usize, r: usize, rng: &mut R) -> DenseMatrix {
    assert!(r < k, "at most K-1 directions are orthogonal to 1");
    let mut seed = gaussian_matrix(k, r + 1, rng);
    seed.set_col(0, &vec![1.0; k]);
    let q = orthonormal_columns(&seed);
    q.columns(1, r + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn etf_gram_examples() {
        let g = etf_gram(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { -0.5 };
                assert!((g[(i, j)] - want).abs() < 1e-15);
            }
        }
        assert_eq!(
            etf_gram(2).unwrap(),
            DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]])
        );
        for k in 2..12 {
            let g = etf_gram(k).unwrap();
            assert!((g.trace() - k as f64).abs() < 1e-12);
            for i in 0..k {
                assert!(g.row(i).iter().sum::<f64>().abs() < 1e-12);
            }
        }
        assert!(etf_gram(1).is_err());
    }

    #[test]
    fn simplex_etf_matches_gram() {
        let m = simplex_etf(5).unwrap();
        let g = m.gram_cols().sub(&etf_gram(5).unwrap());
        assert!(g.max_abs() < 1e-14);
    }

    #[test]
    fn gof_gram_examples() {
        let g = gof_gram(&[1.0, 1.0, 1.0]).unwrap();
        assert!(g.sub(&DenseMatrix::identity(3).scale(1.0 / 3.0)).max_abs() < 1e-16);
        let g = gof_gram(&[2.0, 1.0]).unwrap();
        assert!((g[(0, 0)] - 0.8).abs() < 1e-15 && (g[(1, 1)] - 0.2).abs() < 1e-15);
        assert!((gof_gram(&[0.3, 7.0, 2.0]).unwrap().trace() - 1.0).abs() < 1e-15);
        assert!(gof_gram(&[1.0, 0.0]).is_err());
        assert!(gof_gram(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn random_frames_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_orthonormal(9, 4, &mut rng);
        assert!(q.gram_cols().sub(&DenseMatrix::identity(4)).max_abs() < 1e-14);
        let c = random_centered_orthonormal(5, 4, &mut rng);
        assert!(c.gram_cols().sub(&DenseMatrix::identity(4)).max_abs() < 1e-14);
        let ones = DenseMatrix::from_rows(&[vec![1.0; 5]]);
        assert!(ones.matmul(&c).max_abs() < 1e-14);
        // c cᵀ spans exactly the centred subspace
        assert!(c.gram_rows().sub(&centering(5)).max_abs() < 1e-14);
    }
}
