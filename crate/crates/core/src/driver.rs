//! Adaptive growth of the reduced basis.
//!
//! The mean is updated once; every forward call happens there. Afterwards
//! the Jacobian at the final mean is frozen and bases are added one at a
//! time. Each stage alternates subspace optimization and the `q(theta) q(tau)`
//! fixed point until the lower bound settles, then records the information
//! gain of the newest coordinate.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardEval, ForwardModel};
use crate::mean::{update_mu, MuOptions, MuUpdateReport, SmoothPrior};
use crate::stiefel::{optimize_w, SubspaceObjective, WOptions};
use crate::vb::{elbo, q_fixed_point, ElboBreakdown, NoisePrior, ReducedPosterior};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverConfig {
    /// Prior precision of the first reduced coordinate, and the floor of
    /// every later one.
    pub lambda0_1: f64,
    pub info_gain_threshold: f64,
    pub info_gain_window: usize,
    /// The stopping rule is only consulted from this many bases on.
    pub min_bases: usize,
    pub max_bases: usize,
    pub seed: u64,
    pub noise: NoisePrior,
    pub mu: MuOptions,
    pub w: WOptions,
    pub q_max_iter: usize,
    pub q_tol: f64,
    /// Relative change of the bound over `sweep_window` sweeps that ends a stage.
    pub sweep_tol: f64,
    pub sweep_window: usize,
    pub max_sweeps: usize,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            lambda0_1: 1e-10,
            info_gain_threshold: 0.01,
            info_gain_window: 5,
            min_bases: 1,
            max_bases: 30,
            seed: 0,
            noise: NoisePrior::default(),
            mu: MuOptions::default(),
            w: WOptions::default(),
            q_max_iter: 50,
            q_tol: 1e-10,
            sweep_tol: 1e-8,
            sweep_window: 3,
            max_sweeps: 200,
        }
    }
}

impl DriverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.lambda0_1 > 0.0 && self.lambda0_1.is_finite()) {
            return bad("lambda0_1 must be positive");
        }
        if !(self.info_gain_threshold > 0.0 && self.info_gain_threshold < 1.0) {
            return bad("info_gain_threshold must lie in (0, 1)");
        }
        if self.info_gain_window == 0 {
            return bad("info_gain_window must be at least 1");
        }
        if self.max_bases == 0 || self.min_bases > self.max_bases {
            return bad("need 1 <= max_bases and min_bases <= max_bases");
        }
        if self.w.window == 0 || self.sweep_window == 0 {
            return bad("window lengths must be at least 1");
        }
        self.noise.validate()
    }
}

/// One completed stage of the basis growth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub d_theta: usize,
    pub info_gain: f64,
    /// No coordinate carries any information; `info_gain` is reported as 0.
    pub info_gain_degenerate: bool,
    pub kl_numerator: f64,
    pub elbo: f64,
    pub forward_calls: usize,
    pub sweeps: usize,
    pub w_iterations: usize,
    pub mean_tau: f64,
    pub lambda0: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    InfoGain,
    MaxBases,
    /// The basis spans the whole parameter space.
    Exhausted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub schema_version: u32,
    pub config: DriverConfig,
    pub mu_reports: Vec<MuUpdateReport>,
    pub stages: Vec<StageRecord>,
    pub forward_calls: usize,
    pub termination: Termination,
    pub final_elbo: Option<ElboBreakdown>,
    pub state: ReducedPosterior,
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub trace: Box<RunTrace>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run failed after {} stage(s): {}",
            self.trace.stages.len(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// `-ln r + r - 1` with `r = lambda / lambda0`; nonnegative, zero iff `r = 1`.
pub fn kl_term(lambda0: f64, lambda: f64) -> f64 {
    let r = lambda / lambda0;
    -r.ln() + r - 1.0
}

/// Sum of [`kl_term`] over the first `d` coordinates.
pub fn kl_numerator(lambda0: &[f64], lambda: &[f64], d: usize) -> f64 {
    lambda0[..d]
        .iter()
        .zip(&lambda[..d])
        .map(|(l0, l)| kl_term(*l0, *l))
        .sum()
}

/// Share of the KL divergence contributed by coordinate `d` (1-based), and
/// whether the total vanishes (in which case the share is reported as 0).
pub fn info_gain(lambda0: &[f64], lambda: &[f64], d: usize) -> Result<(f64, bool)> {
    if d == 0 || lambda0.len() < d || lambda.len() < d {
        return Err(Error::InvalidInput(format!(
            "information gain needs 1 <= d <= {}, got {d}",
            lambda0.len().min(lambda.len())
        )));
    }
    let total = kl_numerator(lambda0, lambda, d);
    if !(total > 0.0) {
        return Ok((0.0, true));
    }
    let last = kl_term(lambda0[d - 1], lambda[d - 1]);
    Ok(((last / total).clamp(0.0, 1.0), false))
}

/// Prior precision of the next coordinate: the data part of the previous
/// posterior precision, floored at `lambda0_1`.
pub fn next_prior_precision(lambda0_1: f64, lambda_prev: f64, lambda0_prev: f64) -> f64 {
    lambda0_1.max(lambda_prev - lambda0_prev)
}

/// Append a random unit column orthogonal to the current basis, with its
/// posterior precision starting at its prior precision.
pub fn add_basis(state: &mut ReducedPosterior, rng: &mut ChaCha8Rng, lambda0_1: f64) -> Result<()> {
    let (d, p) = state.w.shape();
    if p >= d {
        return Err(Error::InvalidInput("basis already spans the parameter space".into()));
    }
    let mut column = None;
    for _ in 0..16 {
        let mut v = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        for _ in 0..2 {
            for w in state.w.column_iter() {
                let c = w.dot(&v);
                v.axpy(-c, &w, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            column = Some(v / n);
            break;
        }
    }
    let column = column.ok_or_else(|| Error::Numerical("could not draw an independent basis vector".into()))?;

    let lambda0 = match p {
        0 => lambda0_1,
        _ => next_prior_precision(lambda0_1, state.lambda[p - 1], state.lambda0[p - 1]),
    };
    let mut w = DMatrix::zeros(d, p + 1);
    w.columns_mut(0, p).copy_from(&state.w);
    w.set_column(p, &column);
    state.w = w;
    state.lambda0 = state.lambda0.push(lambda0);
    state.lambda = state.lambda.push(lambda0);
    Ok(())
}

struct Stage {
    sweeps: usize,
    w_iterations: usize,
    elbo: ElboBreakdown,
}

fn run_stage(
    state: &mut ReducedPosterior,
    eval: &ForwardEval,
    gtg: &DMatrix<f64>,
    yhat: &DVector<f64>,
    prior: Option<&SmoothPrior>,
    config: &DriverConfig,
) -> Result<Stage> {
    q_fixed_point(state, eval, yhat, config.q_max_iter, config.q_tol)?;
    let mut history: VecDeque<f64> = VecDeque::new();
    let mut w_iterations = 0;
    let mut sweeps = 0;
    let mut bound = elbo(state, eval, yhat, prior)?;
    for s in 1..=config.max_sweeps {
        sweeps = s;
        let objective = SubspaceObjective::new(gtg.clone(), &state.lambda, state.mean_tau())?;
        let res = optimize_w(&objective, &state.w, &config.w)?;
        w_iterations += res.iterations;
        state.w = res.w;
        q_fixed_point(state, eval, yhat, config.q_max_iter, config.q_tol)?;
        bound = elbo(state, eval, yhat, prior)?;
        if !bound.total.is_finite() {
            return Err(Error::Numerical("lower bound is not finite".into()));
        }
        history.push_back(bound.total);
        if history.len() > config.sweep_window {
            let old = history.pop_front().unwrap();
            let scale = old.abs().max(bound.total.abs()).max(f64::MIN_POSITIVE);
            if (bound.total - old).abs() <= config.sweep_tol * scale {
                break;
            }
        }
    }
    Ok(Stage {
        sweeps,
        w_iterations,
        elbo: bound,
    })
}

/// Run the full inference from `mu0`. `prior` is the smoothness prior on
/// the mean, if any.
pub fn run(
    model: &dyn ForwardModel,
    yhat: &DVector<f64>,
    mu0: DVector<f64>,
    mut prior: Option<SmoothPrior>,
    config: &DriverConfig,
) -> std::result::Result<RunTrace, RunFailure> {
    let mut trace = RunTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        config: config.clone(),
        mu_reports: Vec::new(),
        stages: Vec::new(),
        forward_calls: 0,
        termination: Termination::Failed,
        final_elbo: None,
        state: ReducedPosterior::new(mu0.clone(), config.noise),
    };
    let calls_at_start = model.forward_calls();
    match drive(model, yhat, prior.as_mut(), config, &mut trace) {
        Ok(()) => {
            trace.forward_calls = model.forward_calls() - calls_at_start;
            Ok(trace)
        }
        Err(error) => {
            trace.forward_calls = model.forward_calls() - calls_at_start;
            trace.termination = Termination::Failed;
            Err(RunFailure {
                error,
                trace: Box::new(trace),
            })
        }
    }
}

fn drive(
    model: &dyn ForwardModel,
    yhat: &DVector<f64>,
    mut prior: Option<&mut SmoothPrior>,
    config: &DriverConfig,
    trace: &mut RunTrace,
) -> Result<()> {
    config.validate()?;
    if yhat.len() != model.dim_y() {
        return Err(Error::DimensionMismatch {
            what: "observation vector",
            expected: model.dim_y(),
            got: yhat.len(),
        });
    }
    model.check_dim(&trace.state.mu)?;
    let calls_at_start = model.forward_calls();

    let phase = update_mu(&mut trace.state, model, yhat, prior.as_deref_mut(), &config.mu)?;
    trace.mu_reports = phase.reports;
    let eval = phase.eval;
    let prior = prior.as_deref();
    let gtg = eval.g.transpose() * &eval.g;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    trace.final_elbo = Some(elbo(&trace.state, &eval, yhat, prior)?);

    loop {
        let state = &mut trace.state;
        let d = state.dim_theta();
        if d >= config.max_bases {
            trace.termination = Termination::MaxBases;
            break;
        }
        if d >= state.dim_psi() {
            trace.termination = Termination::Exhausted;
            break;
        }
        add_basis(state, &mut rng, config.lambda0_1)?;
        let stage = run_stage(state, &eval, &gtg, yhat, prior, config)?;
        let d = state.dim_theta();
        let lambda0 = state.lambda0.as_slice();
        let lambda = state.lambda.as_slice();
        let (gain, degenerate) = info_gain(lambda0, lambda, d)?;
        trace.final_elbo = Some(stage.elbo);
        trace.stages.push(StageRecord {
            d_theta: d,
            info_gain: gain,
            info_gain_degenerate: degenerate,
            kl_numerator: kl_numerator(lambda0, lambda, d),
            elbo: stage.elbo.total,
            forward_calls: model.forward_calls() - calls_at_start,
            sweeps: stage.sweeps,
            w_iterations: stage.w_iterations,
            mean_tau: state.mean_tau(),
            lambda0: lambda0.to_vec(),
            lambda: lambda.to_vec(),
        });

        let window = config.info_gain_window;
        if d >= config.min_bases
            && trace.stages.len() >= window
            && trace.stages[trace.stages.len() - window..]
                .iter()
                .all(|s| s.info_gain < config.info_gain_threshold)
        {
            trace.termination = Termination::InfoGain;
            break;
        }
    }
    Ok(())
}
