use thiserror::Error;

/// Errors produced by the solver, the inference engine and the file layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("singular stiffness matrix at free dof {dof}: the Dirichlet set does not remove all rigid-body modes")]
    SingularStiffness { dof: usize },

    #[error("forward model failed at psi = {psi:?}: {source}")]
    Forward {
        psi: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the failure comes from the numerics rather than from the
    /// caller's input or the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularStiffness { .. } | Error::Forward { .. } | Error::Numerical(_)
        )
    }
}
