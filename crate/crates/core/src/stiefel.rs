//! Maximization of `F_W(W) = -(<tau>/2) tr(W^T A W Lambda^-1)`, `A = G^T G`,
//! over matrices with orthonormal columns.
//!
//! Steps follow the Cayley curve `Y(alpha) = (I + alpha/2 B)^-1 (I - alpha/2 B) W`
//! with skew `B = D W^T - W D^T`, which stays on the Stiefel manifold for every
//! `alpha`. `B` has rank at most `2p`, so the `d x d` inverse reduces to a
//! `2p x 2p` solve. Step lengths come from the Barzilai-Borwein ratio with a
//! nonmonotone (max over a sliding window) acceptance test and halving.
//!
//! The optimizer minimizes `f = -F_W`; `D` is the gradient of `f`, which makes
//! the Cayley curve an ascent curve for `F_W`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vb::orthonormality_defect;

/// Halvings allowed when the reduced Cayley system is singular.
const MAX_SINGULAR_HALVINGS: usize = 30;

/// `F_W` and its gradient for a fixed curvature matrix, precisions and `<tau>`.
#[derive(Debug, Clone)]
pub struct SubspaceObjective {
    gtg: DMatrix<f64>,
    inv_lambda: DVector<f64>,
    mean_tau: f64,
}

impl SubspaceObjective {
    pub fn new(gtg: DMatrix<f64>, lambda: &DVector<f64>, mean_tau: f64) -> Result<Self> {
        if !gtg.is_square() {
            return Err(Error::InvalidInput("curvature matrix must be square".into()));
        }
        if lambda.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidInput("precisions must be positive".into()));
        }
        Ok(Self {
            gtg,
            inv_lambda: lambda.map(|l| 1.0 / l),
            mean_tau,
        })
    }

    pub fn from_jacobian(g: &DMatrix<f64>, lambda: &DVector<f64>, mean_tau: f64) -> Result<Self> {
        Self::new(g.transpose() * g, lambda, mean_tau)
    }

    pub fn value(&self, w: &DMatrix<f64>) -> f64 {
        self.value_with(w, &(&self.gtg * w))
    }

    /// `dF_W/dW = -<tau> A W Lambda^-1`.
    pub fn gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        self.gradient_with(&self.gtg * w)
    }

    /// `A W` for reuse by [`Self::value_with`] and [`Self::gradient_with`].
    fn curvature_times(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        &self.gtg * w
    }

    fn value_with(&self, w: &DMatrix<f64>, aw: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for (i, il) in self.inv_lambda.iter().enumerate() {
            s += w.column(i).dot(&aw.column(i)) * il;
        }
        -0.5 * self.mean_tau * s
    }

    fn gradient_with(&self, mut aw: DMatrix<f64>) -> DMatrix<f64> {
        for (mut col, il) in aw.column_iter_mut().zip(self.inv_lambda.iter()) {
            col *= -self.mean_tau * il;
        }
        aw
    }
}

/// `dF_W/dW = -<tau> G^T G W Lambda^-1`, computed without forming `G^T G`.
pub fn grad_fw(
    w: &DMatrix<f64>,
    g: &DMatrix<f64>,
    lambda: &DVector<f64>,
    mean_tau: f64,
) -> DMatrix<f64> {
    let mut out = g.transpose() * (g * w);
    for (mut col, l) in out.column_iter_mut().zip(lambda.iter()) {
        col *= -mean_tau / l;
    }
    out
}

/// Skew matrix `B = D W^T - W D^T` held as `U V^T` with `U = [D, W]`,
/// `V = [W, -D]`.
#[derive(Debug, Clone)]
pub struct SkewFactors {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl SkewFactors {
    pub fn new(grad: &DMatrix<f64>, w: &DMatrix<f64>) -> Self {
        let (d, p) = w.shape();
        let mut u = DMatrix::zeros(d, 2 * p);
        let mut v = DMatrix::zeros(d, 2 * p);
        u.columns_mut(0, p).copy_from(grad);
        u.columns_mut(p, p).copy_from(w);
        v.columns_mut(0, p).copy_from(w);
        v.columns_mut(p, p).copy_from(&(-grad));
        Self { u, v }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    /// `B W` without forming `B`.
    pub fn apply(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        &self.u * (self.v.transpose() * w)
    }
}

/// Dense skew matrix, for checks on small problems.
pub fn skew(grad: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    grad * w.transpose() - w * grad.transpose()
}

/// One Cayley step `(I + alpha/2 B)^-1 (I - alpha/2 B) W`. Returns the new
/// iterate and the step actually used, which is halved (at most 30 times)
/// if the linear system is singular.
pub fn cayley_step(
    w: &DMatrix<f64>,
    b: &SkewFactors,
    alpha: f64,
) -> Result<(DMatrix<f64>, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {alpha}")));
    }
    let (d, p) = w.shape();
    if p == 0 {
        return Ok((w.clone(), alpha));
    }
    let mut alpha = alpha;
    for _ in 0..=MAX_SINGULAR_HALVINGS {
        let step = if 2 * p >= d {
            cayley_dense(w, b, alpha)
        } else {
            cayley_low_rank(w, b, alpha)
        };
        match step {
            Some(y) if y.iter().all(|v| v.is_finite()) => return Ok((y, alpha)),
            _ => alpha *= 0.5,
        }
    }
    Err(Error::Numerical(
        "Cayley system singular after repeated step halving".into(),
    ))
}

fn cayley_dense(w: &DMatrix<f64>, b: &SkewFactors, alpha: f64) -> Option<DMatrix<f64>> {
    let d = w.nrows();
    let lhs = DMatrix::identity(d, d) + b.dense() * (0.5 * alpha);
    let rhs = w - b.apply(w) * (0.5 * alpha);
    lhs.lu().solve(&rhs)
}

/// `Y = W - alpha U (I + alpha/2 V^T U)^-1 V^T W`.
fn cayley_low_rank(w: &DMatrix<f64>, b: &SkewFactors, alpha: f64) -> Option<DMatrix<f64>> {
    let k = b.u.ncols();
    let vt = b.v.transpose();
    let small = DMatrix::identity(k, k) + (&vt * &b.u) * (0.5 * alpha);
    let vtw = &vt * w;
    let x = small.lu().solve(&vtw)?;
    Some(w - (&b.u * x) * alpha)
}

/// Barzilai-Borwein step `|<dW, dD>| / <dD, dD>`, or `alpha_init` when the
/// ratio is undefined.
pub fn bb_step(delta_w: &DMatrix<f64>, delta_grad: &DMatrix<f64>, alpha_init: f64) -> f64 {
    let num = delta_w.dot(delta_grad).abs();
    let den = delta_grad.norm_squared();
    let alpha = num / den;
    if den > 0.0 && alpha.is_finite() && alpha > 0.0 {
        alpha
    } else {
        alpha_init
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WOptions {
    pub max_iters: usize,
    /// Relative change of `F_W` across `window` iterations that ends the run.
    pub tol: f64,
    /// First step, as a rotation angle: the first `alpha` is this value
    /// divided by the norm of the projected gradient.
    pub alpha_init: f64,
    /// Nonmonotone reference window.
    pub window: usize,
}

impl Default for WOptions {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-10,
            alpha_init: 1e-3,
            window: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WTraceRow {
    pub iteration: usize,
    pub f_w: f64,
    pub alpha: f64,
    pub defect: f64,
}

#[derive(Debug, Clone)]
pub struct WOptResult {
    pub w: DMatrix<f64>,
    pub f_w: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<WTraceRow>,
}

/// Re-orthonormalize with a thin QR, keeping column signs.
fn retract(w: &DMatrix<f64>) -> DMatrix<f64> {
    let p = w.ncols();
    let qr = w.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let mut q = q.columns(0, p).into_owned();
    for i in 0..p {
        if r[(i, i)] < 0.0 {
            q.column_mut(i).neg_mut();
        }
    }
    q
}

/// Maximize `F_W` from `w0`. Uses no forward evaluations. The best iterate
/// seen is returned even if the run stops on `max_iters`.
pub fn optimize_w(
    objective: &SubspaceObjective,
    w0: &DMatrix<f64>,
    opts: &WOptions,
) -> Result<WOptResult> {
    let p = w0.ncols();
    let mut w = w0.clone();
    let mut f_w = objective.value(&w);
    let mut trace = vec![WTraceRow {
        iteration: 0,
        f_w,
        alpha: 0.0,
        defect: orthonormality_defect(&w),
    }];
    if p == 0 {
        return Ok(WOptResult {
            w,
            f_w,
            iterations: 0,
            converged: true,
            trace,
        });
    }

    let mut best = (f_w, w.clone());
    let mut grad = -objective.gradient(&w);
    let mut history: VecDeque<f64> = VecDeque::from([-f_w]);
    let mut recent: VecDeque<f64> = VecDeque::from([f_w]);
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iters {
        let b = SkewFactors::new(&grad, &w);
        let bw = b.apply(&w);
        let slope = grad.dot(&bw);
        let bw_norm = bw.norm();
        if bw_norm <= 1e-14 * grad.norm() || slope <= 0.0 {
            converged = true;
            break;
        }

        let mut alpha = match &prev {
            Some((w_prev, g_prev)) => bb_step(&(&w - w_prev), &(&bw - g_prev), opts.alpha_init),
            None => opts.alpha_init / bw_norm,
        };
        let reference = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut accepted = None;
        for _ in 0..=MAX_SINGULAR_HALVINGS {
            let (trial, used) = cayley_step(&w, &b, alpha)?;
            alpha = used;
            let aw = objective.curvature_times(&trial);
            let f_trial = -objective.value_with(&trial, &aw);
            if f_trial <= reference - 1e-4 * alpha * slope {
                accepted = Some((trial, aw, f_trial));
                break;
            }
            alpha *= 0.5;
        }
        let Some((mut trial, mut aw, f_trial)) = accepted else {
            converged = true;
            break;
        };
        let mut defect = orthonormality_defect(&trial);
        if defect > 1e-12 {
            trial = retract(&trial);
            aw = objective.curvature_times(&trial);
            defect = orthonormality_defect(&trial);
        }
        iterations = it;
        grad = -objective.gradient_with(aw);
        prev = Some((std::mem::replace(&mut w, trial), bw));
        f_w = -f_trial;
        if f_w > best.0 {
            best = (f_w, w.clone());
        }
        trace.push(WTraceRow {
            iteration: it,
            f_w,
            alpha,
            defect,
        });

        history.push_back(-f_w);
        if history.len() > opts.window {
            history.pop_front();
        }
        recent.push_back(f_w);
        if recent.len() > opts.window + 1 {
            let old = recent.pop_front().unwrap();
            let scale = f_w.abs().max(old.abs()).max(f64::MIN_POSITIVE);
            if (f_w - old).abs() <= opts.tol * scale {
                converged = true;
                break;
            }
        }
    }

    Ok(WOptResult {
        w: best.1,
        f_w: best.0,
        iterations,
        converged,
        trace,
    })
}
