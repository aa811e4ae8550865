//! Complex Hermitian linear algebra and the cached contraction planner.
//!
//! Matrices here are small (M×M with M the channel count, or the stacked
//! WPE dimension), so everything is dense, row-major and allocation-light.
//! Bulk tensors live in `ndarray` elsewhere; these types are what the
//! per-frequency kernels operate on.

mod contraction;
mod matrix;

pub use contraction::{
    contract, contract_with_cache, plan_contraction, ContractionPlan, ContractionSpec, PlanCache,
    PlanStep, ShapeSignature, Tensor,
};
pub use matrix::{
    hermitian_eigenvalues, hermitian_solve, hermitize, regularize, CMatrix, Cholesky,
    HermitianMatrix, PdFactor,
};

pub use num_complex::Complex64 as C64;

/// Default relative diagonal loading applied before solves.
pub const DEFAULT_REGULARIZATION: f64 = 1e-10;

/// Eigenvalues below `EIGEN_FLOOR * max_eigenvalue` are raised to that floor
/// when a Cholesky factorization fails.
pub const EIGEN_FLOOR: f64 = 1e-10;
