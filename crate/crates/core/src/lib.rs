//! Polynomial portfolio optimization with perturbed sample-average
//! approximations solved globally by moment relaxations.
//!
//! The pipeline is:
//!
//! 1. [`portfolio`] turns return samples (or an analytic normal model) into a
//!    loss polynomial in the first `n - 1` proportions, the last proportion
//!    having been eliminated through the budget constraint.
//! 2. [`psaa`] assembles the order-`d0` moment relaxation of that polynomial
//!    plus `eps * ||y||`, solves it with the interior-point solver in
//!    [`conic`], doubles `eps` until the relaxation solves, and reads the
//!    proportions off the first-order moments when the moment matrix is rank
//!    one.
//! 3. [`data`] handles price ingestion, seeded sampling and the Monte Carlo
//!    consistency study.

pub mod conic;
pub mod data;
mod error;
pub mod moments;
pub mod polynomials;
pub mod portfolio;
pub mod psaa;

pub use error::{Error, Result};
