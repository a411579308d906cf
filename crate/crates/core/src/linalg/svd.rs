//! One-sided (Hestenes) Jacobi SVD and the routines built on it.
//!
//! Targets small dense matrices (up to a few hundred on the short side). The
//! algorithm orthogonalises the columns of the tall orientation of `A` by plane
//! rotations; column norms are the singular values and the accumulated
//! rotations are the right singular vectors.

use super::matrix::{dot, norm2, DenseMatrix};
use super::LinalgError;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;

/// Thin SVD `A = U · diag(S) · Vt` with `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `m × k`, orthonormal columns.
    pub u: DenseMatrix,
    /// Descending, nonnegative.
    pub s: Vec<f64>,
    /// `k × n`, orthonormal rows.
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        self.u.scale_columns(&self.s).matmul(&self.vt)
    }

    /// Rank-`r` reconstruction from the leading `r` triplets.
    pub fn truncated(&self, r: usize) -> DenseMatrix {
        let r = r.min(self.s.len());
        let u = self.u.columns(0, r);
        let vt = self.vt.row_block(0, r);
        u.scale_columns(&self.s[..r]).matmul(&vt)
    }
}

pub fn svd(a: &DenseMatrix) -> Result<SvdResult, LinalgError> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(LinalgError::Empty);
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFiniteInput);
    }
    if a.rows() >= a.cols() {
        let (u, s, v) = jacobi_tall(a)?;
        Ok(SvdResult {
            u,
            s,
            vt: v.transpose(),
        })
    } else {
        // Aᵀ = U' S V'ᵀ  ⇒  A = V' S U'ᵀ
        let (u_t, s, v_t) = jacobi_tall(&a.transpose())?;
        Ok(SvdResult {
            u: v_t,
            s,
            vt: u_t.transpose(),
        })
    }
}

/// Returns `(U m×n, S, V n×n)` for `m ≥ n`.
fn jacobi_tall(a: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix), LinalgError> {
    let m = a.rows();
    let n = a.cols();
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = f64::EPSILON;
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(LinalgError::NoConvergence { sweeps });
        }
        sweeps += 1;
        converged = true;
        for i in 0..n - 1 {
            for j in (i + 1)..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
    }

    let mut sv: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    // stable sort keeps the first-index order among equal singular values
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sv[y].partial_cmp(&sv[x]).unwrap_or(std::cmp::Ordering::Equal));

    let s_max = order.first().map_or(0.0, |&k| sv[k]);
    let tiny = s_max * (m as f64) * eps;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &k) in order.iter().enumerate() {
        let norm = sv[k];
        if norm > tiny && norm > 0.0 {
            u_cols.push(cols[k].iter().map(|x| x / norm).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            deficient.push(slot);
        }
    }
    for &slot in &deficient {
        // unfilled slots are still zero and project out nothing
        let filled = u_cols.clone();
        u_cols[slot] = complete_basis_vector(&filled, m);
    }

    let sorted_sv: Vec<f64> = order.iter().map(|&k| sv[k]).collect();
    sv = sorted_sv;
    let mut u = DenseMatrix::zeros(m, n);
    let mut vm = DenseMatrix::zeros(n, n);
    for (slot, &k) in order.iter().enumerate() {
        u.set_col(slot, &u_cols[slot]);
        vm.set_col(slot, &v[k]);
    }
    Ok((u, sv, vm))
}

fn rotate(vecs: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = vecs.split_at_mut(j);
    let (a, b) = (&mut lo[i], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// A unit vector orthogonal to every vector in `basis` (which must be
/// orthonormal or zero). Tries the canonical axes in order.
fn complete_basis_vector(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for axis in 0..m {
        let mut e = vec![0.0; m];
        e[axis] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let p = dot(&e, b);
                e.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nrm = norm2(&e);
        if nrm > 0.5 {
            return e.into_iter().map(|x| x / nrm).collect();
        }
        if nrm > best_norm {
            best_norm = nrm;
            best = e;
        }
    }
    let nrm = norm2(&best);
    best.into_iter().map(|x| x / nrm).collect()
}

/// Default cutoff factor: `max(rows, cols) · ε`.
pub fn default_rcond(a: &DenseMatrix) -> f64 {
    a.rows().max(a.cols()) as f64 * f64::EPSILON
}

/// Moore–Penrose pseudo-inverse. Singular values `≤ rcond · s_max` are
/// treated as zero.
pub fn pseudo_inverse(a: &DenseMatrix, rcond: f64) -> Result<DenseMatrix, LinalgError> {
    if !(rcond >= 0.0) {
        return Err(LinalgError::InvalidArgument(format!(
            "rcond must be nonnegative, got {rcond}"
        )));
    }
    let dec = svd(a)?;
    let s_max = dec.s.first().copied().unwrap_or(0.0);
    let cutoff = rcond * s_max;
    let inv: Vec<f64> = dec
        .s
        .iter()
        .map(|&s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    // A† = V diag(1/s) Uᵀ
    Ok(dec.vt.transpose().scale_columns(&inv).matmul_t(&dec.u))
}

pub fn pseudo_inverse_default(a: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    pseudo_inverse(a, default_rcond(a))
}

/// Best rank-`r` approximation in Frobenius norm (truncated SVD). Among equal
/// singular values the earlier triplets of the decomposition are kept.
pub fn best_rank_r(a: &DenseMatrix, r: usize) -> Result<DenseMatrix, LinalgError> {
    let k = a.rows().min(a.cols());
    if r > k {
        return Err(LinalgError::InvalidArgument(format!(
            "rank {r} exceeds min(rows, cols) = {k}"
        )));
    }
    if r == 0 {
        return Ok(DenseMatrix::zeros(a.rows(), a.cols()));
    }
    Ok(svd(a)?.truncated(r))
}

pub fn singular_values(a: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    Ok(svd(a)?.s)
}

/// Thin orthonormal factor `Q` of `A = QR` (`A` is `m × n`, `m ≥ n`),
/// by modified Gram–Schmidt with one reorthogonalisation pass. Rank-deficient
/// columns are replaced by a completion of the basis.
pub fn orthonormal_columns(a: &DenseMatrix) -> DenseMatrix {
    let m = a.rows();
    let n = a.cols();
    assert!(m >= n, "orthonormal_columns needs rows >= cols");
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = a.col(j);
        for _ in 0..2 {
            for b in &q {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nrm = norm2(&v);
        if nrm > scale * 1e-10 {
            q.push(v.into_iter().map(|x| x / nrm).collect());
        } else {
            q.push(complete_basis_vector(&q, m));
        }
    }
    let mut out = DenseMatrix::zeros(m, n);
    for (j, c) in q.iter().enumerate() {
        out.set_col(j, c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormality_error(q: &DenseMatrix) -> f64 {
        q.gram_cols()
            .sub(&DenseMatrix::identity(q.cols()))
            .frobenius_norm()
    }

    #[test]
    fn diagonal_and_rotation() {
        let d = DenseMatrix::from_diag(&[3.0, 1.0]);
        let r = svd(&d).unwrap();
        assert!((r.s[0] - 3.0).abs() < 1e-15 && (r.s[1] - 1.0).abs() < 1e-15);

        let th = std::f64::consts::PI / 6.0;
        let rot = DenseMatrix::from_rows(&[
            vec![th.cos(), -th.sin()],
            vec![th.sin(), th.cos()],
        ]);
        let r = svd(&rot).unwrap();
        assert!((r.s[0] - 1.0).abs() < 1e-14 && (r.s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ascending_diagonal_is_sorted() {
        let d = DenseMatrix::from_diag(&[1.0, 5.0, 2.0]);
        let r = svd(&d).unwrap();
        assert_eq!(r.s, vec![5.0, 2.0, 1.0]);
        assert!(r.reconstruct().sub(&d).frobenius_norm() < 1e-14);
    }

    #[test]
    fn rank_deficient_and_wide() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]);
        let r = svd(&a).unwrap();
        assert_eq!(r.u.shape(), (2, 2));
        assert_eq!(r.vt.shape(), (2, 3));
        assert!(r.s[1] < 1e-14);
        assert!(orthonormality_error(&r.u) < 1e-12);
        assert!(orthonormality_error(&r.vt.transpose()) < 1e-12);
        assert!(r.reconstruct().sub(&a).frobenius_norm() < 1e-13);

        let z = DenseMatrix::zeros(3, 2);
        let r = svd(&z).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0]);
        assert!(orthonormality_error(&r.u) < 1e-14);
    }

    #[test]
    fn empty_and_nonfinite_rejected() {
        assert!(matches!(
            svd(&DenseMatrix::zeros(0, 3)),
            Err(LinalgError::Empty)
        ));
    }

    #[test]
    fn pseudo_inverse_examples() {
        let d = DenseMatrix::from_diag(&[2.0, 0.0]);
        let p = pseudo_inverse(&d, 1e-12).unwrap();
        assert_eq!(p, DenseMatrix::from_diag(&[0.5, 0.0]));

        let z = DenseMatrix::zeros(2, 3);
        let p = pseudo_inverse_default(&z).unwrap();
        assert_eq!(p, DenseMatrix::zeros(3, 2));

        assert!(pseudo_inverse(&d, -1.0).is_err());
    }

    #[test]
    fn rank_truncation_examples() {
        let p = best_rank_r(&DenseMatrix::identity(3), 2).unwrap();
        assert_eq!(p, DenseMatrix::from_diag(&[1.0, 1.0, 0.0]));
        let p = best_rank_r(&DenseMatrix::from_diag(&[3.0, 1.0]), 1).unwrap();
        assert_eq!(p, DenseMatrix::from_diag(&[3.0, 0.0]));
        assert!(best_rank_r(&DenseMatrix::identity(2), 3).is_err());
        assert_eq!(
            best_rank_r(&DenseMatrix::identity(2), 0).unwrap(),
            DenseMatrix::zeros(2, 2)
        );
    }

    #[test]
    fn gram_schmidt_completes_deficient_columns() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]]);
        let q = orthonormal_columns(&a);
        assert!(orthonormality_error(&q) < 1e-14);
    }
}
