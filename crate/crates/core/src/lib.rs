//! Seemingly unrelated linear regression with finite Gaussian mixture errors.
//!
//! The crate fits mixture-SUR models by EM, computes the analytic score and
//! Hessian of the log-likelihood for inference, selects regressors and the
//! number of components by BIC, and runs parametric bootstraps.

pub mod calculus;
pub mod em;
pub mod error;
pub mod inference;
pub mod likelihood;
mod linalg;
pub mod model;
pub mod simboot;

pub use error::{Error, Result};
pub use model::{count_parameters, Dataset, Design, ModelSpec, PackedTheta, Theta};
