use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("scheme `{scheme}` unsupported: {reason}")]
    UnsupportedScheme { scheme: String, reason: String },

    #[error("operation requires {0}")]
    WrongSystem(String),

    #[error("implicit step failed at step {step:?} after {iterations} Newton iterations (residual {residual:e})")]
    StepFailure {
        step: Option<usize>,
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("reference flow could not reach tolerance {tol:e} within {max_steps} steps (estimate {estimate:e})")]
    ToleranceUnreachable { tol: f64, max_steps: usize, estimate: f64 },

    #[error("infeasible position: H0 - U(q) = {0:e} is not positive")]
    InfeasiblePosition(f64),

    #[error("constraint intersection is empty (x_p^T M x_p = {quad:e} > c = {level:e})")]
    EmptyIntersection { quad: f64, level: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("gradient root must be scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("flow map expects epsilon input but none was supplied")]
    MissingEpsilon,

    #[error("time {t} outside evaluable window: {reason}")]
    TimeOutOfRange { t: f64, reason: String },

    #[error("flow map application {k} failed: {source}")]
    Rollout { k: usize, source: Box<Error> },

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("transport matrix singular at step {step} (condition number {condition:e})")]
    SingularTransport { step: usize, condition: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("missing data-loss targets for step {0}")]
    MissingTargets(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
