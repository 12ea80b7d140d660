//! Norm-constrained UDU / UDV factorizations.
//!
//! Projected gradient solvers for `X = U diag(λ) Uᵀ` with a Frobenius-ball
//! factor and nonnegative weights, the Burer–Monteiro baseline, synthetic
//! matrix-sensing problems, spectral diagnostics, and a three-layer linear
//! network `V diag(w) Uᵀ` with SVD pruning.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod linops;
pub mod problem;
pub mod rng;
mod serde_mat;
pub mod solver;
pub mod spectra;
pub mod udv;

pub use error::{Error, Result};
