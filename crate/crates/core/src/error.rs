use nalgebra::DMatrix;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("invalid correlation matrix: {0}")]
    InvalidCorrelation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        last: Box<DMatrix<f64>>,
    },

    #[error("degenerate distribution: all values identical")]
    DegenerateDistribution,

    #[error("variable {variable} is constant within the neighborhood of sample {sample}")]
    DegenerateVariable { sample: usize, variable: usize },

    #[error("matrix is not positive definite for Cholesky (pivot {pivot:e} at row {row})")]
    CholeskyFailed { row: usize, pivot: f64 },

    #[error("singular kriging system")]
    SingularSystem,

    #[error("variogram fit failed: {message} (weighted residual {residual:e})")]
    FitFailed { message: String, residual: f64 },

    #[error("structure type {0} is not supported by turning bands")]
    UnsupportedStructure(&'static str),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("parse error in {source_name} at line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
