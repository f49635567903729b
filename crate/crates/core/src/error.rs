use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh parameters: {0}")]
    Parameter(String),
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum FemError {
    #[error("field belongs to a different mesh")]
    MeshMismatch,
    #[error("field has length {found}, expected {expected}")]
    Length { expected: usize, found: usize },
    #[error("conductivity must be positive, found {value} at node {node}")]
    NonPositiveConductivity { node: usize, value: f64 },
    #[error("boundary current violates compatibility: ∫f ds = {integral:e} (scale {scale:e})")]
    Compatibility { integral: f64, scale: f64 },
    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("forward cache is stale: it was computed for a different conductivity")]
    StaleCache,
    #[error("current index {index} out of range (have {count})")]
    CurrentIndex { index: usize, count: usize },
    #[error("no forward solution cached for current {0}")]
    NotCached(usize),
    #[error("residual exponent q must exceed 2, got {0}")]
    Exponent(f64),
}

#[derive(Debug, Error)]
pub enum PenaltyError {
    #[error("invalid penalty parameters: {0}")]
    Parameter(String),
    #[error("total-variation solver stopped after {iterations} iterations with relative gap {gap:e}")]
    TvNoConvergence { iterations: usize, gap: f64 },
    #[error(transparent)]
    Fem(#[from] FemError),
}

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom: {0}")]
    Invalid(String),
    #[error("image: {0}")]
    Image(String),
    #[error("invalid current family: {0}")]
    Currents(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Output(#[from] IoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
