use thiserror::Error;

/// Errors reported by mesh construction, basis building, assembly and solves.
#[derive(Debug, Error)]
pub enum FemError {
    #[error("unsupported dimension {0}, expected 2 or 3")]
    UnsupportedDimension(usize),
    #[error("degenerate cell {cell}: measure {measure:.3e}")]
    DegenerateCell { cell: usize, measure: f64 },
    #[error("index {index} out of range for {what} (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("unsupported quadrature degree {0} (max 40)")]
    UnsupportedDegree(usize),
    #[error("unsupported polynomial space: {0}")]
    UnsupportedSpace(String),
    #[error("operator/value shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported element family: {0}")]
    UnsupportedFamily(String),
    #[error("field derivative callable required for {0} degrees of freedom")]
    MissingDerivative(&'static str),
    #[error("incompatible spaces: {0}")]
    Incompatibility(String),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("quadrature degree {have} below required {need}")]
    RequiredDegree { have: usize, need: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
