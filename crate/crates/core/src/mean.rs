//! Point update of the posterior mean `mu`.
//!
//! Each outer iteration linearizes the forward map at `mu` and solves
//!
//! ```text
//! (<tau> G^T G + L^T <Phi> L) dmu = <tau> G^T (yhat - y(mu)) - L^T <Phi> (L mu - c)
//! ```
//!
//! where `L` takes differences across neighbouring elements and `c` holds the
//! values of clamped neighbours. The trial point is accepted only if the exact
//! objective `-(<tau>/2)|yhat - y(mu)|^2 + ln p(mu)` increases; otherwise the
//! step is halved. The jump precisions `<phi_j>` come from an EM E-step under
//! a `Gamma(a_phi, b_phi)` hyperprior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{MaterialField, Mesh2D};
use crate::forward::{ForwardEval, ForwardModel};
use crate::vb::{update_q_tau, ReducedPosterior};

/// Smallest admissible `b_phi_j`; a zero jump under the Jeffreys hyperprior
/// would otherwise give an infinite precision.
pub const PHI_RATE_FLOOR: f64 = 1e-12;

/// Tikhonov shift added to a singular Gauss-Newton matrix, relative to its
/// largest diagonal entry (absolute when that entry is below one).
pub const TIKHONOV_FLOOR: f64 = 1e-10;

/// Second member of a neighbour pair: another parameter, or a clamped
/// element whose value enters the difference as a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Partner {
    Free(usize),
    Fixed(f64),
}

/// How the jump precisions are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    /// Refreshed by [`em_phi`] from the current `mu`.
    Em,
    /// Held at their initial values.
    Fixed,
}

/// Jump-penalty prior on `mu` with one Gamma-distributed precision per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothPrior {
    pub pairs: Vec<(usize, Partner)>,
    pub a_phi: f64,
    pub b_phi: f64,
    /// Per-pair posterior `(a_phi_j, b_phi_j)`.
    pub phi_post: Vec<(f64, f64)>,
    pub mode: PhiMode,
}

impl SmoothPrior {
    /// EM-driven prior; precisions start at the floor value and are set by the
    /// first [`em_phi`] call.
    pub fn new(pairs: Vec<(usize, Partner)>, a_phi: f64, b_phi: f64) -> Result<Self> {
        if !(a_phi >= 0.0 && b_phi >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "hyperprior parameters must be nonnegative, got ({a_phi}, {b_phi})"
            )));
        }
        let start = (a_phi + 0.5, b_phi.max(PHI_RATE_FLOOR));
        Ok(Self {
            phi_post: vec![start; pairs.len()],
            pairs,
            a_phi,
            b_phi,
            mode: PhiMode::Em,
        })
    }

    /// Prior with the same known precision `phi` on every pair.
    pub fn fixed(pairs: Vec<(usize, Partner)>, phi: f64) -> Result<Self> {
        if !(phi >= 0.0 && phi.is_finite()) {
            return Err(Error::InvalidInput(format!("jump precision must be finite and nonnegative, got {phi}")));
        }
        Ok(Self {
            phi_post: vec![(phi, 1.0); pairs.len()],
            pairs,
            a_phi: 0.0,
            b_phi: 0.0,
            mode: PhiMode::Fixed,
        })
    }

    /// Neighbour pairs of a mesh in parameter numbering. Pairs of two clamped
    /// elements are dropped; a clamped neighbour becomes a constant.
    pub fn pairs_for_mesh(mesh: &Mesh2D, template: &MaterialField) -> Result<Vec<(usize, Partner)>> {
        if template.len() != mesh.n_elements() {
            return Err(Error::DimensionMismatch {
                what: "template field length",
                expected: mesh.n_elements(),
                got: template.len(),
            });
        }
        let mut index = vec![None; template.len()];
        for (i, k) in template.free_indices().into_iter().enumerate() {
            index[k] = Some(i);
        }
        let pairs = mesh
            .neighbor_pairs()
            .into_iter()
            .filter_map(|(k, l)| match (index[k], index[l]) {
                (Some(i), Some(j)) => Some((i, Partner::Free(j))),
                (Some(i), None) => Some((i, Partner::Fixed(template.psi[l]))),
                (None, Some(j)) => Some((j, Partner::Fixed(template.psi[k]))),
                (None, None) => None,
            })
            .collect();
        Ok(pairs)
    }

    /// Pairs `(i, i + 1)` of a one-dimensional chain of `n` parameters.
    pub fn chain_pairs(n: usize) -> Vec<(usize, Partner)> {
        (1..n).map(|i| (i - 1, Partner::Free(i))).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn mean_phi(&self) -> Vec<f64> {
        self.phi_post.iter().map(|(a, b)| a / b).collect()
    }

    fn check(&self, mu: &DVector<f64>) -> Result<()> {
        for &(k, p) in &self.pairs {
            let l = match p {
                Partner::Free(l) => l,
                Partner::Fixed(_) => k,
            };
            if k.max(l) >= mu.len() {
                return Err(Error::DimensionMismatch {
                    what: "smoothing pair index",
                    expected: mu.len(),
                    got: k.max(l) + 1,
                });
            }
        }
        Ok(())
    }
}

fn jump(mu: &DVector<f64>, k: usize, partner: Partner) -> f64 {
    match partner {
        Partner::Free(l) => mu[k] - mu[l],
        Partner::Fixed(c) => mu[k] - c,
    }
}

/// E-step: `a_phi_j = a_phi + 1/2`, `b_phi_j = b_phi + jump_j^2 / 2`, with
/// `b_phi_j` clipped at [`PHI_RATE_FLOOR`]. Returns the number of clipped
/// pairs. Does nothing in [`PhiMode::Fixed`].
pub fn em_phi(mu: &DVector<f64>, prior: &mut SmoothPrior) -> Result<usize> {
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("mean field is not finite".into()));
    }
    prior.check(mu)?;
    if prior.mode == PhiMode::Fixed {
        return Ok(0);
    }
    let mut floored = 0;
    for (post, &(k, p)) in prior.phi_post.iter_mut().zip(&prior.pairs) {
        let j = jump(mu, k, p);
        let b = prior.b_phi + 0.5 * j * j;
        if b < PHI_RATE_FLOOR {
            floored += 1;
        }
        *post = (prior.a_phi + 0.5, b.max(PHI_RATE_FLOOR));
    }
    Ok(floored)
}

/// `ln p(mu) = -1/2 sum_j <phi_j> jump_j^2` and its gradient.
pub fn log_prior_mu_and_grad(mu: &DVector<f64>, prior: &SmoothPrior) -> (f64, DVector<f64>) {
    let mut value = 0.0;
    let mut grad = DVector::zeros(mu.len());
    for (&(k, p), (a, b)) in prior.pairs.iter().zip(&prior.phi_post) {
        let phi = a / b;
        let j = jump(mu, k, p);
        value -= 0.5 * phi * j * j;
        grad[k] -= phi * j;
        if let Partner::Free(l) = p {
            grad[l] += phi * j;
        }
    }
    (value, grad)
}

/// `L^T <Phi> L`, assembled pair by pair.
pub fn prior_precision(dim: usize, prior: &SmoothPrior) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(dim, dim);
    for (&(k, p), (a, b)) in prior.pairs.iter().zip(&prior.phi_post) {
        let phi = a / b;
        h[(k, k)] += phi;
        if let Partner::Free(l) = p {
            h[(l, l)] += phi;
            h[(k, l)] -= phi;
            h[(l, k)] -= phi;
        }
    }
    h
}

/// Gauss-Newton matrix `<tau> G^T G (+ L^T <Phi> L)`.
pub fn gauss_newton_matrix(
    eval: &ForwardEval,
    mean_tau: f64,
    prior: Option<&SmoothPrior>,
    regularize: bool,
) -> DMatrix<f64> {
    let mut m = eval.g.transpose() * &eval.g * mean_tau;
    if let (true, Some(p)) = (regularize, prior) {
        m += prior_precision(eval.g.ncols(), p);
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonStep {
    pub delta: DVector<f64>,
    /// The system was singular and a Tikhonov shift was applied.
    pub shifted: bool,
}

/// Solve the linearized mean update at `mu`. With `regularize == false` the
/// prior terms are dropped from both sides.
pub fn gauss_newton_step(
    mu: &DVector<f64>,
    eval: &ForwardEval,
    yhat: &DVector<f64>,
    mean_tau: f64,
    prior: Option<&SmoothPrior>,
    regularize: bool,
) -> Result<GaussNewtonStep> {
    if eval.g.ncols() != mu.len() || eval.y.len() != yhat.len() || eval.g.nrows() != yhat.len() {
        return Err(Error::DimensionMismatch {
            what: "Gauss-Newton inputs",
            expected: mu.len(),
            got: eval.g.ncols(),
        });
    }
    let r = yhat - &eval.y;
    let mut rhs = eval.g.transpose() * r * mean_tau;
    if let (true, Some(p)) = (regularize, prior) {
        rhs += log_prior_mu_and_grad(mu, p).1;
    }
    let m = gauss_newton_matrix(eval, mean_tau, prior, regularize);
    let n = m.nrows();
    let max_diag = m.diagonal().amax();

    if let Some(chol) = m.clone().cholesky() {
        let min_pivot = chol.l_dirty().diagonal().iter().map(|l| l * l).fold(f64::INFINITY, f64::min);
        if n == 0 || min_pivot > 1e-12 * max_diag {
            return Ok(GaussNewtonStep {
                delta: chol.solve(&rhs),
                shifted: false,
            });
        }
    }
    let shift = TIKHONOV_FLOOR * max_diag.max(1.0);
    let shifted = m + DMatrix::identity(n, n) * shift;
    let delta = shifted
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Numerical("Gauss-Newton matrix is not positive semidefinite".into()))?;
    Ok(GaussNewtonStep {
        delta,
        shifted: true,
    })
}

/// Exact objective `-(tau/2)|yhat - y|^2 (+ ln p(mu))`.
pub fn mu_objective(
    mu: &DVector<f64>,
    y: &DVector<f64>,
    yhat: &DVector<f64>,
    mean_tau: f64,
    prior: Option<&SmoothPrior>,
    regularize: bool,
) -> f64 {
    let misfit = -0.5 * mean_tau * (yhat - y).norm_squared();
    match (regularize, prior) {
        (true, Some(p)) => misfit + log_prior_mu_and_grad(mu, p).0,
        _ => misfit,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MuOptions {
    pub max_outer: usize,
    pub max_halvings: usize,
    /// Accepted steps before the smoothness prior is switched on.
    pub activate_after: usize,
    /// `max |dmu|` below which the phase ends.
    pub step_tol: f64,
    /// Relative objective gain below which the phase ends.
    pub objective_tol: f64,
}

impl Default for MuOptions {
    fn default() -> Self {
        Self {
            max_outer: 30,
            max_halvings: 10,
            activate_after: 5,
            step_tol: 1e-6,
            objective_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuUpdateReport {
    pub accepted: bool,
    pub step_norm: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub forward_calls: usize,
    pub regularized: bool,
    pub halvings: usize,
    pub shifted: bool,
    pub floored_pairs: usize,
}

/// Result of a mean phase: per-iteration reports and the forward evaluation
/// at the final `mu`, which later phases linearize around.
#[derive(Debug, Clone)]
pub struct MuPhase {
    pub reports: Vec<MuUpdateReport>,
    pub eval: ForwardEval,
    pub forward_calls: usize,
}

/// Run the mean phase from `state.mu`. `q(tau)` is refreshed after each
/// accepted step. If an unregularized step is rejected or vanishes, the prior
/// is switched on early rather than stopping.
pub fn update_mu(
    state: &mut ReducedPosterior,
    model: &dyn ForwardModel,
    yhat: &DVector<f64>,
    mut prior: Option<&mut SmoothPrior>,
    opts: &MuOptions,
) -> Result<MuPhase> {
    let calls_at_start = model.forward_calls();
    let mut eval = model.evaluate(&state.mu)?;
    update_q_tau(state, &eval, yhat)?;

    let mut reports = Vec::new();
    let mut accepted_steps = 0;
    let mut regularize = prior.is_some() && opts.activate_after == 0;

    for _ in 0..opts.max_outer {
        let floored_pairs = match (regularize, prior.as_deref_mut()) {
            (true, Some(p)) => em_phi(&state.mu, p)?,
            _ => 0,
        };
        let p = prior.as_deref();
        let tau = state.mean_tau();
        let f_before = mu_objective(&state.mu, &eval.y, yhat, tau, p, regularize);
        let step = gauss_newton_step(&state.mu, &eval, yhat, tau, p, regularize)?;
        let step_norm = step.delta.amax();
        let calls_before = model.forward_calls();

        let mut report = MuUpdateReport {
            accepted: false,
            step_norm,
            objective_before: f_before,
            objective_after: f_before,
            forward_calls: 0,
            regularized: regularize,
            halvings: 0,
            shifted: step.shifted,
            floored_pairs,
        };

        let mut outcome = None;
        if step_norm >= opts.step_tol {
            let mut alpha = 1.0;
            for h in 0..=opts.max_halvings {
                let trial = &state.mu + &step.delta * alpha;
                match model.evaluate(&trial) {
                    Ok(e) => {
                        let f_after = mu_objective(&trial, &e.y, yhat, tau, p, regularize);
                        if f_after > f_before {
                            report.halvings = h;
                            report.objective_after = f_after;
                            outcome = Some((trial, e));
                            break;
                        }
                    }
                    Err(e) if e.is_numerical() => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
        }
        report.forward_calls = model.forward_calls() - calls_before;

        match outcome {
            Some((trial, e)) => {
                report.accepted = true;
                report.step_norm = (&trial - &state.mu).amax();
                state.mu = trial;
                eval = e;
                update_q_tau(state, &eval, yhat)?;
                accepted_steps += 1;
                reports.push(report);
                let gain = report.objective_after - report.objective_before;
                let small_gain = gain <= opts.objective_tol * report.objective_after.abs();
                if prior.is_some() && accepted_steps >= opts.activate_after {
                    if !regularize {
                        regularize = true;
                        continue;
                    }
                }
                if small_gain && (regularize || prior.is_none()) {
                    break;
                }
            }
            None => {
                reports.push(report);
                if !regularize && prior.is_some() {
                    regularize = true;
                } else {
                    break;
                }
            }
        }
    }

    Ok(MuPhase {
        reports,
        eval,
        forward_calls: model.forward_calls() - calls_at_start,
    })
}
