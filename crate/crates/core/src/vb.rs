//! Mean-field variational state `q(theta) q(tau)` and its closed-form updates.
//!
//! With the forward map linearized at `mu`, the optimal factors are
//! `q(theta) = N(0, diag(lambda)^-1)` and `q(tau) = Gamma(a, b)`:
//!
//! ```text
//! a        = a0 + d_y / 2
//! b        = b0 + |yhat - y(mu)|^2 / 2 + tr(W^T G^T G W Lambda^-1) / 2
//! lambda_i = lambda0_i + <tau> |G w_i|^2
//! ```
//!
//! The two updates are coupled through `<tau> = a / b` and `Lambda`, so they
//! are iterated to a joint fixed point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::forward::ForwardEval;
use crate::mean::SmoothPrior;

/// Smallest admissible rate of `q(tau)`; reached only for an exact fit with
/// no subspace, where the Jeffreys posterior degenerates.
pub const RATE_FLOOR: f64 = 1e-300;

/// Prior on the noise precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisePrior {
    /// `Gamma(a0, b0)`; `a0 = b0 = 0` is the scale-invariant Jeffreys limit.
    Gamma { a0: f64, b0: f64 },
    /// Noise precision known exactly; `q(tau)` is a point mass.
    Known { tau: f64 },
}

impl Default for NoisePrior {
    fn default() -> Self {
        NoisePrior::Gamma { a0: 0.0, b0: 0.0 }
    }
}

impl NoisePrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoisePrior::Gamma { a0, b0 } if a0 >= 0.0 && b0 >= 0.0 => Ok(()),
            NoisePrior::Known { tau } if tau > 0.0 && tau.is_finite() => Ok(()),
            other => Err(Error::InvalidInput(format!("invalid noise prior {other:?}"))),
        }
    }

    /// `ln Z(a0, b0)` of the prior, `None` for the improper Jeffreys limit.
    fn log_normalizer(&self) -> Option<f64> {
        match *self {
            NoisePrior::Gamma { a0, b0 } if a0 > 0.0 && b0 > 0.0 => Some(log_gamma_normalizer(a0, b0)),
            _ => None,
        }
    }
}

/// `ln Z(a, b)` with `Z = Gamma(a) / b^a`.
pub fn log_gamma_normalizer(a: f64, b: f64) -> f64 {
    ln_gamma(a) - a * b.ln()
}

/// Full variational state: point estimates `mu` and `W`, the diagonal
/// precisions of `q(theta)` and the Gamma parameters of `q(tau)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedPosterior {
    pub mu: DVector<f64>,
    pub w: DMatrix<f64>,
    pub lambda0: DVector<f64>,
    pub lambda: DVector<f64>,
    pub noise: NoisePrior,
    pub a: f64,
    pub b: f64,
}

impl ReducedPosterior {
    /// State with an empty subspace. `q(tau)` is not yet informed by data;
    /// call [`update_q_tau`] before reading [`mean_tau`](Self::mean_tau).
    pub fn new(mu: DVector<f64>, noise: NoisePrior) -> Self {
        let d = mu.len();
        // Unused for a known precision.
        let (a, b) = match noise {
            NoisePrior::Gamma { a0, b0 } => (a0, b0),
            NoisePrior::Known { .. } => (0.0, 0.0),
        };
        Self {
            mu,
            w: DMatrix::zeros(d, 0),
            lambda0: DVector::zeros(0),
            lambda: DVector::zeros(0),
            noise,
            a,
            b,
        }
    }

    pub fn dim_psi(&self) -> usize {
        self.mu.len()
    }

    pub fn dim_theta(&self) -> usize {
        self.w.ncols()
    }

    pub fn mean_tau(&self) -> f64 {
        match self.noise {
            NoisePrior::Known { tau } => tau,
            NoisePrior::Gamma { .. } => self.a / self.b,
        }
    }

    pub fn mean_log_tau(&self) -> f64 {
        match self.noise {
            NoisePrior::Known { tau } => tau.ln(),
            NoisePrior::Gamma { .. } => digamma(self.a) - self.b.ln(),
        }
    }

    /// `max |W^T W - I|`.
    pub fn orthonormality_defect(&self) -> f64 {
        orthonormality_defect(&self.w)
    }
}

pub fn orthonormality_defect(w: &DMatrix<f64>) -> f64 {
    let p = w.ncols();
    if p == 0 {
        return 0.0;
    }
    (w.transpose() * w - DMatrix::identity(p, p)).amax()
}

/// Data curvature along each basis column, `s_i = w_i^T G^T G w_i`.
pub fn data_curvature(g: &DMatrix<f64>, w: &DMatrix<f64>) -> DVector<f64> {
    let gw = g * w;
    DVector::from_iterator(w.ncols(), gw.column_iter().map(|c| c.norm_squared()))
}

fn residual(eval: &ForwardEval, yhat: &DVector<f64>) -> Result<DVector<f64>> {
    if yhat.len() != eval.y.len() {
        return Err(Error::DimensionMismatch {
            what: "observation vector",
            expected: eval.y.len(),
            got: yhat.len(),
        });
    }
    Ok(yhat - &eval.y)
}

/// Update `q(tau)`; returns the new `(a, b)`. A no-op for a known precision.
pub fn update_q_tau(
    state: &mut ReducedPosterior,
    eval: &ForwardEval,
    yhat: &DVector<f64>,
) -> Result<(f64, f64)> {
    let r = residual(eval, yhat)?;
    let NoisePrior::Gamma { a0, b0 } = state.noise else {
        return Ok((state.a, state.b));
    };
    let s = data_curvature(&eval.g, &state.w);
    let trace: f64 = s.iter().zip(state.lambda.iter()).map(|(s, l)| s / l).sum();
    let a = a0 + 0.5 * yhat.len() as f64;
    let b = b0 + 0.5 * r.norm_squared() + 0.5 * trace;
    if !b.is_finite() || b < 0.0 {
        return Err(Error::Numerical(format!("Gamma rate update produced b = {b}")));
    }
    state.a = a;
    state.b = b.max(RATE_FLOOR);
    Ok((state.a, state.b))
}

/// Update the diagonal precisions of `q(theta)` from the current `<tau>`.
pub fn update_q_theta(state: &mut ReducedPosterior, eval: &ForwardEval) -> Result<DVector<f64>> {
    if eval.g.ncols() != state.dim_psi() {
        return Err(Error::DimensionMismatch {
            what: "Jacobian columns",
            expected: state.dim_psi(),
            got: eval.g.ncols(),
        });
    }
    let s = data_curvature(&eval.g, &state.w);
    let tau = state.mean_tau();
    let lambda = DVector::from_iterator(
        s.len(),
        state.lambda0.iter().zip(s.iter()).map(|(l0, s)| l0 + tau * s),
    );
    if lambda.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical("non-finite posterior precision".into()));
    }
    state.lambda = lambda.clone();
    Ok(lambda)
}

/// Alternate the two updates until the relative change of `(lambda, a, b)`
/// drops below `tol` or `max_iter` sweeps are spent. Returns the sweep count.
pub fn q_fixed_point(
    state: &mut ReducedPosterior,
    eval: &ForwardEval,
    yhat: &DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<usize> {
    for it in 1..=max_iter {
        let before: Vec<f64> = state
            .lambda
            .iter()
            .copied()
            .chain([state.a, state.b])
            .collect();
        update_q_tau(state, eval, yhat)?;
        update_q_theta(state, eval)?;
        let after = state.lambda.iter().copied().chain([state.a, state.b]);
        let change = before
            .iter()
            .zip(after)
            .map(|(x, y)| {
                if x == &y {
                    0.0
                } else {
                    (x - y).abs() / x.abs().max(y.abs())
                }
            })
            .fold(0.0, f64::max);
        if change < tol {
            return Ok(it);
        }
    }
    Ok(max_iter)
}

/// Named addends of the variational lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub total: f64,
    /// `E_q[ln p(yhat | theta, tau)]` under the linearized map.
    pub likelihood: f64,
    pub theta_prior: f64,
    pub theta_entropy: f64,
    pub tau_prior: f64,
    pub tau_entropy: f64,
    /// EM surrogate of `ln p(mu)`; zero without a smoothness prior.
    pub log_prior_mu: f64,
    /// Uniform on the Stiefel manifold: a constant, reported as zero.
    pub log_prior_w: f64,
}

/// Evaluate the lower bound at the current state. For the Jeffreys limit
/// `a0 = b0 = 0` the (infinite) prior normalizer is dropped as a constant.
pub fn elbo(
    state: &ReducedPosterior,
    eval: &ForwardEval,
    yhat: &DVector<f64>,
    smooth_prior: Option<&SmoothPrior>,
) -> Result<ElboBreakdown> {
    let r = residual(eval, yhat)?;
    let dy = yhat.len() as f64;
    let tau = state.mean_tau();
    let log_tau = state.mean_log_tau();
    let s = data_curvature(&eval.g, &state.w);

    let trace: f64 = s.iter().zip(state.lambda.iter()).map(|(s, l)| s / l).sum();
    let likelihood = -0.5 * dy * (2.0 * std::f64::consts::PI).ln() + 0.5 * dy * log_tau
        - 0.5 * tau * r.norm_squared()
        - 0.5 * tau * trace;

    let theta_prior: f64 = state
        .lambda0
        .iter()
        .zip(state.lambda.iter())
        .map(|(l0, l)| 0.5 * l0.ln() - 0.5 * l0 / l)
        .sum();
    let theta_entropy: f64 = state
        .lambda
        .iter()
        .map(|l| -0.5 * l.ln() + 0.5)
        .sum();

    let (tau_prior, tau_entropy) = match state.noise {
        NoisePrior::Known { .. } => (0.0, 0.0),
        NoisePrior::Gamma { a0, b0 } => {
            let prior = (a0 - 1.0) * log_tau - b0 * tau - state.noise.log_normalizer().unwrap_or(0.0);
            let entropy = -(state.a - 1.0) * log_tau + state.b * tau
                + log_gamma_normalizer(state.a, state.b);
            (prior, entropy)
        }
    };

    let log_prior_mu = match smooth_prior {
        Some(p) => crate::mean::log_prior_mu_and_grad(&state.mu, p).0,
        None => 0.0,
    };
    let log_prior_w = 0.0;

    let total = likelihood
        + theta_prior
        + theta_entropy
        + tau_prior
        + tau_entropy
        + log_prior_mu
        + log_prior_w;
    Ok(ElboBreakdown {
        total,
        likelihood,
        theta_prior,
        theta_entropy,
        tau_prior,
        tau_entropy,
        log_prior_mu,
        log_prior_w,
    })
}

/// Gaussian approximation of the posterior on `psi`: mean `mu` and
/// covariance `F F^T` with `F = W Lambda^{-1/2}`, never densified.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiStats {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
    pub std: DVector<f64>,
}

pub fn posterior_psi_stats(state: &ReducedPosterior) -> PsiStats {
    let mut factor = state.w.clone();
    for (mut col, l) in factor.column_iter_mut().zip(state.lambda.iter()) {
        col /= l.sqrt();
    }
    let std = DVector::from_iterator(
        factor.nrows(),
        factor.row_iter().map(|row| row.norm_squared().sqrt()),
    );
    PsiStats {
        mean: state.mu.clone(),
        factor,
        std,
    }
}
