//! Forward-model contract: outputs and their parameter Jacobian at a point.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::{observe, MaterialField, PlaneStrainSolver};

/// Model outputs `y(psi)` and sensitivities `G = dy/dpsi` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardEval {
    pub y: DVector<f64>,
    pub g: DMatrix<f64>,
}

/// Thread-safe tally of forward evaluations.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicUsize);

impl CallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn increment(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

/// A parameter-to-observable map that also provides its Jacobian.
///
/// Implementors supply [`compute`](ForwardModel::compute); callers use
/// [`evaluate`](ForwardModel::evaluate) or [`predict`](ForwardModel::predict),
/// each of which counts as exactly one forward call.
pub trait ForwardModel: Send + Sync {
    fn dim_psi(&self) -> usize;

    fn dim_y(&self) -> usize;

    fn counter(&self) -> &CallCounter;

    /// Outputs and Jacobian, uncounted.
    fn compute(&self, psi: &DVector<f64>) -> Result<ForwardEval>;

    /// Outputs only, uncounted. Override when the Jacobian is expensive.
    fn compute_outputs(&self, psi: &DVector<f64>) -> Result<DVector<f64>> {
        self.compute(psi).map(|e| e.y)
    }

    fn evaluate(&self, psi: &DVector<f64>) -> Result<ForwardEval> {
        self.check_dim(psi)?;
        self.counter().increment();
        self.compute(psi).map_err(|e| wrap(psi, e))
    }

    fn predict(&self, psi: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(psi)?;
        self.counter().increment();
        self.compute_outputs(psi).map_err(|e| wrap(psi, e))
    }

    fn forward_calls(&self) -> usize {
        self.counter().get()
    }

    fn check_dim(&self, psi: &DVector<f64>) -> Result<()> {
        if psi.len() != self.dim_psi() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.dim_psi(),
                got: psi.len(),
            });
        }
        Ok(())
    }
}

fn wrap(psi: &DVector<f64>, e: Error) -> Error {
    match e {
        Error::Forward { .. } => e,
        other => Error::Forward {
            psi: psi.iter().copied().collect(),
            source: Box::new(other),
        },
    }
}

/// Affine map `y = A psi + offset`; its linearization is exact everywhere.
#[derive(Debug)]
pub struct LinearOracleModel {
    pub a: DMatrix<f64>,
    pub offset: DVector<f64>,
    counter: CallCounter,
}

impl LinearOracleModel {
    pub fn new(a: DMatrix<f64>, offset: Option<DVector<f64>>) -> Result<Self> {
        let offset = offset.unwrap_or_else(|| DVector::zeros(a.nrows()));
        if offset.len() != a.nrows() {
            return Err(Error::DimensionMismatch {
                what: "offset length",
                expected: a.nrows(),
                got: offset.len(),
            });
        }
        Ok(Self {
            a,
            offset,
            counter: CallCounter::new(),
        })
    }
}

impl ForwardModel for LinearOracleModel {
    fn dim_psi(&self) -> usize {
        self.a.ncols()
    }

    fn dim_y(&self) -> usize {
        self.a.nrows()
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }

    fn compute(&self, psi: &DVector<f64>) -> Result<ForwardEval> {
        Ok(ForwardEval {
            y: &self.a * psi + &self.offset,
            g: self.a.clone(),
        })
    }
}

/// Plane-strain elastography: the parameter vector holds the log-moduli of
/// the free elements only, in element order; clamped elements keep the
/// values of the template field.
#[derive(Debug)]
pub struct ElastographyModel {
    solver: PlaneStrainSolver,
    template: MaterialField,
    free: Vec<usize>,
    observed: Vec<usize>,
    counter: CallCounter,
}

impl ElastographyModel {
    pub fn new(
        solver: PlaneStrainSolver,
        template: MaterialField,
        observed: Vec<usize>,
    ) -> Result<Self> {
        if template.len() != solver.mesh().n_elements() {
            return Err(Error::DimensionMismatch {
                what: "template field length",
                expected: solver.mesh().n_elements(),
                got: template.len(),
            });
        }
        let n = solver.mesh().n_dofs();
        if let Some(&bad) = observed.iter().find(|&&d| d >= n) {
            return Err(Error::InvalidInput(format!("observed dof {bad} out of range")));
        }
        let free = template.free_indices();
        Ok(Self {
            solver,
            template,
            free,
            observed,
            counter: CallCounter::new(),
        })
    }

    /// Observe every free dof of the solver.
    pub fn observing_free_dofs(solver: PlaneStrainSolver, template: MaterialField) -> Result<Self> {
        let observed = solver.free_dofs().to_vec();
        Self::new(solver, template, observed)
    }

    pub fn solver(&self) -> &PlaneStrainSolver {
        &self.solver
    }

    pub fn template(&self) -> &MaterialField {
        &self.template
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    /// Element index of each parameter.
    pub fn free_elements(&self) -> &[usize] {
        &self.free
    }

    /// Full material field for a parameter vector.
    pub fn field(&self, psi: &DVector<f64>) -> Result<MaterialField> {
        self.template.with_free_values(psi.as_slice())
    }

    /// Parameter vector (free entries) of a full field.
    pub fn restrict(&self, field: &MaterialField) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&k| field.psi[k]))
    }
}

impl ForwardModel for ElastographyModel {
    fn dim_psi(&self) -> usize {
        self.free.len()
    }

    fn dim_y(&self) -> usize {
        self.observed.len()
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }

    fn compute(&self, psi: &DVector<f64>) -> Result<ForwardEval> {
        let field = self.field(psi)?;
        let sol = self.solver.solve(&field)?;
        let y = DVector::from_vec(observe(&sol.u, &self.observed)?);
        let g_full = self.solver.jacobian(&field, &sol, &self.observed)?;
        let g = g_full.select_columns(self.free.iter());
        Ok(ForwardEval { y, g })
    }

    fn compute_outputs(&self, psi: &DVector<f64>) -> Result<DVector<f64>> {
        let field = self.field(psi)?;
        let sol = self.solver.solve(&field)?;
        Ok(DVector::from_vec(observe(&sol.u, &self.observed)?))
    }
}
