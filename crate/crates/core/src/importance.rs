//! Importance sampling with the variational posterior as proposal.
//!
//! Draws `theta ~ q(theta) = N(0, Lambda^-1)`, maps them to `psi = mu + W theta`
//! and weights each by `p(yhat | theta) p(theta) / q(theta)`, where the
//! likelihood has the noise precision integrated out against its prior. All
//! weights are kept in log form.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::vb::{log_gamma_normalizer, posterior_psi_stats, NoisePrior, ReducedPosterior};

/// Floor on the squared residual inside the logarithm.
pub const RESIDUAL_FLOOR: f64 = 1e-300;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ISReport {
    pub samples: usize,
    /// Unnormalized log-weights; `-inf` marks a discarded sample.
    #[serde(with = "crate::io::float::vec")]
    pub log_weights: Vec<f64>,
    #[serde(with = "crate::io::float::scalar")]
    pub ess: f64,
    #[serde(with = "crate::io::float::scalar")]
    pub log_evidence: f64,
    /// Standard error of the evidence estimate relative to the estimate.
    #[serde(with = "crate::io::float::scalar")]
    pub evidence_rel_se: f64,
    #[serde(with = "crate::io::float::vec")]
    pub psi_mean: Vec<f64>,
    #[serde(with = "crate::io::float::vec")]
    pub psi_std: Vec<f64>,
    pub forward_calls: usize,
    pub discarded: usize,
    /// Every weight vanished; moments and ESS are meaningless.
    pub degenerate: bool,
}

impl ISReport {
    /// Weights normalized to sum to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.log_weights);
        self.log_weights.iter().map(|l| (l - lse).exp()).collect()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `(sum w)^2 / (M sum w^2)` from log-weights; invariant to a common shift.
pub fn effective_sample_size(log_weights: &[f64]) -> f64 {
    let m = log_weights.len() as f64;
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return 0.0;
    }
    let (s1, s2) = log_weights.iter().fold((0.0, 0.0), |(s1, s2), l| {
        let w = (l - max).exp();
        (s1 + w, s2 + w * w)
    });
    s1 * s1 / (m * s2)
}

/// Log of the noise-marginalized likelihood as a function of the squared
/// residual `r2`, dropping terms that do not depend on it.
pub fn marginal_log_likelihood(r2: f64, dim_y: usize, noise: &NoisePrior) -> f64 {
    let half = 0.5 * dim_y as f64;
    let r2 = r2.max(RESIDUAL_FLOOR);
    match *noise {
        NoisePrior::Gamma { a0, b0 } => ln_gamma(a0 + half) - (a0 + half) * (b0 + 0.5 * r2).ln(),
        NoisePrior::Known { tau } => half * tau.ln() - 0.5 * tau * r2,
    }
}

/// The residual-independent remainder of the log-likelihood; `None` for an
/// improper noise prior, whose evidence is only defined up to a constant.
pub fn likelihood_log_constant(dim_y: usize, noise: &NoisePrior) -> Option<f64> {
    let base = -0.5 * dim_y as f64 * LN_2PI;
    match *noise {
        NoisePrior::Known { .. } => Some(base),
        NoisePrior::Gamma { a0, b0 } if a0 > 0.0 && b0 > 0.0 => Some(base - log_gamma_normalizer(a0, b0)),
        NoisePrior::Gamma { .. } => None,
    }
}

/// Marginal log-likelihood at `psi = mu + W theta`. One forward call.
pub fn log_likelihood_at(
    theta: &DVector<f64>,
    state: &ReducedPosterior,
    model: &dyn ForwardModel,
    yhat: &DVector<f64>,
) -> Result<f64> {
    let psi = &state.mu + &state.w * theta;
    let y = model.predict(&psi)?;
    Ok(marginal_log_likelihood((yhat - y).norm_squared(), yhat.len(), &state.noise))
}

fn log_normal_diag(theta: &DVector<f64>, precision: &DVector<f64>) -> f64 {
    theta
        .iter()
        .zip(precision.iter())
        .map(|(t, p)| 0.5 * (p.ln() - LN_2PI) - 0.5 * p * t * t)
        .sum()
}

/// Draw `m` samples from `q(theta)` and weight each with
/// `log_likelihood(theta, psi) + ln p(theta) - ln q(theta)`. A likelihood
/// that returns a numerical error discards the sample. The evidence
/// includes `log_constant`.
pub fn run_is_with<F>(
    state: &ReducedPosterior,
    m: usize,
    seed: u64,
    log_constant: f64,
    log_likelihood: F,
) -> Result<ISReport>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<f64> + Sync,
{
    if m < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples, got {m}")));
    }
    let p = state.dim_theta();
    if state.lambda.iter().chain(state.lambda0.iter()).any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidInput("precisions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas: Vec<DVector<f64>> = (0..m)
        .map(|_| {
            DVector::from_fn(p, |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / state.lambda[i].sqrt()
            })
        })
        .collect();

    let evaluated: Vec<Result<(DVector<f64>, f64)>> = thetas
        .par_iter()
        .map(|theta| {
            let psi = &state.mu + &state.w * theta;
            match log_likelihood(theta, &psi) {
                Ok(ll) => {
                    let lw = ll + log_normal_diag(theta, &state.lambda0) - log_normal_diag(theta, &state.lambda);
                    Ok((psi, lw))
                }
                Err(e) if e.is_numerical() => Ok((psi, f64::NEG_INFINITY)),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut psis = Vec::with_capacity(m);
    let mut log_weights = Vec::with_capacity(m);
    for r in evaluated {
        let (psi, lw) = r?;
        psis.push(psi);
        log_weights.push(if lw.is_nan() { f64::NEG_INFINITY } else { lw });
    }
    let discarded = log_weights.iter().filter(|l| !l.is_finite()).count();
    let d = state.dim_psi();
    let lse = log_sum_exp(&log_weights);
    if !lse.is_finite() {
        return Ok(ISReport {
            samples: m,
            log_weights,
            ess: 0.0,
            log_evidence: f64::NEG_INFINITY,
            evidence_rel_se: f64::INFINITY,
            psi_mean: vec![f64::NAN; d],
            psi_std: vec![f64::NAN; d],
            forward_calls: 0,
            discarded,
            degenerate: true,
        });
    }

    // Moments of the offsets from mu, so an empty subspace gives exact zeros.
    let weights: Vec<f64> = log_weights.iter().map(|l| (l - lse).exp()).collect();
    let offsets: Vec<DVector<f64>> = psis.iter().map(|psi| psi - &state.mu).collect();
    let mut shift = DVector::zeros(d);
    for (x, w) in offsets.iter().zip(&weights) {
        shift.axpy(*w, x, 1.0);
    }
    let mut var = DVector::zeros(d);
    for (x, w) in offsets.iter().zip(&weights) {
        let dev = x - &shift;
        var.axpy(*w, &dev.component_mul(&dev), 1.0);
    }
    let mean = &state.mu + shift;

    let mf = m as f64;
    let ess = effective_sample_size(&log_weights);
    // Var(w)/E(w)^2 = 1/ESS - 1 for the sample moments.
    let evidence_rel_se = ((1.0 / ess - 1.0).max(0.0) / mf).sqrt();
    Ok(ISReport {
        samples: m,
        log_weights,
        ess,
        log_evidence: lse - mf.ln() + log_constant,
        evidence_rel_se,
        psi_mean: mean.iter().copied().collect(),
        psi_std: var.iter().map(|v| v.sqrt()).collect(),
        forward_calls: 0,
        discarded,
        degenerate: false,
    })
}

/// Importance sampling against the forward model; uses exactly `m` forward
/// calls. For an improper noise prior the evidence omits its constant.
pub fn run_is(
    state: &ReducedPosterior,
    model: &dyn ForwardModel,
    yhat: &DVector<f64>,
    m: usize,
    seed: u64,
) -> Result<ISReport> {
    if yhat.len() != model.dim_y() {
        return Err(Error::DimensionMismatch {
            what: "observation vector",
            expected: model.dim_y(),
            got: yhat.len(),
        });
    }
    let dim_y = yhat.len();
    let constant = likelihood_log_constant(dim_y, &state.noise).unwrap_or(0.0);
    let calls = model.forward_calls();
    let mut report = run_is_with(state, m, seed, constant, |_, psi| {
        let y = model.predict(psi)?;
        Ok(marginal_log_likelihood((yhat - y).norm_squared(), dim_y, &state.noise))
    })?;
    report.forward_calls = model.forward_calls() - calls;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    #[serde(with = "crate::io::float::vec")]
    pub mean_rel_diff: Vec<f64>,
    #[serde(with = "crate::io::float::vec")]
    pub std_rel_diff: Vec<f64>,
    #[serde(with = "crate::io::float::scalar")]
    pub mean_rel_max: f64,
    #[serde(with = "crate::io::float::scalar")]
    pub mean_rel_median: f64,
    #[serde(with = "crate::io::float::scalar")]
    pub std_rel_max: f64,
    #[serde(with = "crate::io::float::scalar")]
    pub std_rel_median: f64,
}

/// `|a - b| / max(|a|, |b|)`, and 0 when both vanish.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Element-wise relative differences between the variational moments of
/// `psi` and the importance-sampling estimates.
pub fn compare_vb_is(state: &ReducedPosterior, report: &ISReport) -> Result<Comparison> {
    if report.psi_mean.len() != state.dim_psi() || report.psi_std.len() != state.dim_psi() {
        return Err(Error::DimensionMismatch {
            what: "importance-sampling moments",
            expected: state.dim_psi(),
            got: report.psi_mean.len(),
        });
    }
    let vb = posterior_psi_stats(state);
    let mean_rel_diff: Vec<f64> = vb
        .mean
        .iter()
        .zip(&report.psi_mean)
        .map(|(a, b)| relative_difference(*a, *b))
        .collect();
    let std_rel_diff: Vec<f64> = vb
        .std
        .iter()
        .zip(&report.psi_std)
        .map(|(a, b)| relative_difference(*a, *b))
        .collect();
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(Comparison {
        mean_rel_max: max(&mean_rel_diff),
        mean_rel_median: median(&mean_rel_diff),
        std_rel_max: max(&std_rel_diff),
        std_rel_median: median(&std_rel_diff),
        mean_rel_diff,
        std_rel_diff,
    })
}

/// Closed-form `ln p(yhat | mu, W)` for an affine map `y = A psi + offset`
/// with known noise precision, `theta ~ N(0, Lambda0^-1)`.
pub fn linear_gaussian_log_evidence(
    a: &DMatrix<f64>,
    offset: &DVector<f64>,
    state: &ReducedPosterior,
    yhat: &DVector<f64>,
) -> Result<f64> {
    let NoisePrior::Known { tau } = state.noise else {
        return Err(Error::InvalidInput("closed-form evidence needs a known noise precision".into()));
    };
    let n = yhat.len();
    let aw = a * &state.w;
    let mut cov = DMatrix::identity(n, n) / tau;
    for (col, l0) in aw.column_iter().zip(state.lambda0.iter()) {
        cov += col * col.transpose() / *l0;
    }
    let r = yhat - (a * &state.mu + offset);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("evidence covariance is not positive definite".into()))?;
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(&r));
    Ok(-0.5 * (n as f64 * LN_2PI + logdet + quad))
}
