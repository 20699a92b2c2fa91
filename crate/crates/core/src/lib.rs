//! Variational Bayesian inference of high-dimensional parameter fields on a
//! learned low-dimensional subspace.
//!
//! The unknown field is represented as `psi = mu + W theta`, where `W` has
//! orthonormal columns and `theta` carries a diagonal Gaussian posterior.
//! The mean `mu` is found by Gauss-Newton steps under a hierarchical
//! jump-penalty prior; `W` is optimized on the Stiefel manifold with
//! Cayley-transform steps; the subspace grows one column at a time until the
//! relative information gain stalls. Importance sampling with the
//! variational posterior as proposal validates the result.
//!
//! The built-in forward model is a plane-strain linear elasticity solver on a
//! structured quadrilateral mesh, parameterized by per-element log-moduli.

pub mod driver;
pub mod error;
pub mod fem;
pub mod forward;
pub mod importance;
pub mod io;
pub mod mean;
pub mod stiefel;
pub mod vb;

pub use error::{Error, Result};
