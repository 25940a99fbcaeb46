use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid function: {0}")]
    InvalidFunction(String),
    #[error("allocation failed for {elems} elements: {reason}")]
    Resource { elems: usize, reason: String },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("time shift {shift} outside buffer range of `{function}`")]
    ShiftOutOfRange { function: String, shift: i64 },
    #[error("unsupported derivative order {0} (only 1 and 2)")]
    UnsupportedDerivative(usize),
    #[error("finite-difference weight system is singular")]
    SingularSystem,
    #[error("solve target does not appear in the equation")]
    TargetNotFound,
    #[error("solve target occurs nonlinearly")]
    NonlinearTarget,
    #[error("cluster writes more than one time function: {0:?}")]
    MultipleWrittenFunctions(Vec<String>),
    #[error("cluster has no equations")]
    EmptyCluster,
    #[error("symbol `{0}` is not registered in the enclosing problem")]
    UnboundSymbol(String),
    #[error("non-affine access to `{0}` cannot be lowered")]
    NonAffineAccess(String),
    #[error("write target `{0}` is a scalar")]
    WriteToScalar(String),
    #[error("stencil name collision: `{0}` declared with different point sets")]
    StencilNameClash(String),
    #[error("NaN detected at step {step} in `{function}`")]
    NanDetected { step: usize, function: String },
    #[error("access {offsets:?} on `{dataset}` is outside its declared stencil")]
    StencilViolation { dataset: String, offsets: Vec<i64> },
    #[error("compiler `{0}` not found")]
    CompilerMissing(String),
    #[error("compilation failed:\n{output}")]
    CompileFailure { output: String },
    #[error("emitted program failed: {0}")]
    RunFailure(String),
    #[error("could not parse RESULT line from program output: {0}")]
    ResultParse(String),
    #[error("buffer shape mismatch between runs")]
    ShapeMismatch,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
