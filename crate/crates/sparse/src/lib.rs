//! Sparse linear algebra for Gaussian Markov random fields.
//!
//! Provides compressed-column storage, fixed-pattern linear combinations,
//! fill-reducing orderings and a supernodal Cholesky factorization with the
//! operations GMRF inference needs: log-determinants, solves and sampling.

mod cholesky;
mod combination;
mod csc;
pub mod ordering;

pub use cholesky::{CholeskyFactor, SymbolicCholesky};
pub use combination::SparseCombination;
pub use csc::CscMatrix;
pub use ordering::Ordering;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("matrix is not positive definite (pivot at column {column})")]
    NotPositiveDefinite { column: usize },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("entry ({row}, {col}) outside a {nrows}x{ncols} matrix")]
    IndexOutOfBounds {
        row: usize,
        col: usize,
        nrows: usize,
        ncols: usize,
    },
    #[error("sparsity pattern differs from the analyzed one")]
    PatternMismatch,
    #[error("invalid sparse layout: {0}")]
    InvalidLayout(String),
}
