//! Dense linear algebra: the matrix type, Jacobi SVD, pseudo-inverse, rank
//! truncation and the canonical collapse geometries.

mod geometry;
mod matrix;
mod svd;

use thiserror::Error;

pub use geometry::{
    centering, etf_gram, gaussian_matrix, gof_gram, random_centered_orthonormal,
    random_orthonormal, simplex_etf,
};
pub use matrix::{cholesky_solve, dot, norm2, DenseMatrix};
pub use svd::{
    best_rank_r, default_rcond, orthonormal_columns, pseudo_inverse, pseudo_inverse_default,
    singular_values, svd, SvdResult, MAX_SWEEPS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("input matrix contains non-finite entries")]
    NonFiniteInput,
    #[error("empty matrix")]
    Empty,
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
