use thiserror::Error;

/// Errors raised by the library. Flow integration wraps these together with the
/// partial trajectory, see [`crate::flow::FlowFailure`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("variable `{name}` at position {pos} is out of range for nvars = {nvars}")]
    VariableOutOfRange { pos: usize, name: String, nvars: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point is not on the surface (residual {residual:e})")]
    NotOnSurface { residual: f64 },
    #[error("gradient of F vanishes on the surface (|grad F| = {norm:e})")]
    SingularGradient { norm: f64 },
    #[error("point is critical for the parameter projection")]
    CriticalPoint,
    #[error("Newton projection did not converge")]
    NoConvergence,
    #[error("operation needs n in {expected}, family has n = {got}")]
    UnsupportedDimension { expected: &'static str, got: usize },
    #[error("no sample of the level was found inside the ball")]
    EmptyLevelInBall,
    #[error("trajectory approached the critical locus (|grad t_M| = {norm:e})")]
    NearCritical { norm: f64 },
    #[error("step size underflow at s = {s}")]
    StepUnderflow { s: f64 },
    #[error("sphere-tangent component of the level field is degenerate (norm {norm:e})")]
    DegenerateSphericalComponent { norm: f64 },
    #[error("degenerate root configuration on the section")]
    RootIsolationFailure,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
