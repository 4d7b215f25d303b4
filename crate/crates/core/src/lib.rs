//! Sparse Lagrangian identification from noisy trajectories.
//!
//! Generalized coordinates are represented by clamped cubic B-splines whose
//! control points are fitted jointly with the coefficients of a candidate
//! library, so that the measured samples are matched and the Euler–Lagrange
//! equations of `L = Σ λ_k φ_k` hold at collocation points. Sequential
//! thresholding prunes the library down to a sparse Lagrangian.
//!
//! Modules:
//! - [`bspline`]: knot vectors, basis evaluation, basis matrices, curves.
//! - [`library`]: candidate terms, their derivative jets, library files.
//! - [`dynamics`]: benchmark systems, RK4 simulation, noisy datasets, basins.
//! - [`identify`]: the joint spline/coefficient fit with thresholding.
//! - [`metrics`]: coefficient error, precision and recall.

pub mod banded;
pub mod bspline;
pub mod dynamics;
pub mod error;
pub mod identify;
pub mod library;
pub mod metrics;
pub mod taylor;

pub use error::{Error, Result};
