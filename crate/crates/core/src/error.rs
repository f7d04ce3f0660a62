use thiserror::Error;

/// Errors raised by the numerical core and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("perturbation `{0}` is only defined for rings")]
    TopologyMismatch(String),

    #[error("perturbation index {index} out of range for `{kind}` on N = {n}")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        n: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no physical dephasing process found after {tried} candidates")]
    SamplingExhausted { tried: u64 },

    #[error("invalid dephasing process: {0}")]
    InvalidProcess(String),

    #[error("branch assignment ambiguous: minimum overlap {min_overlap:.3e} below threshold")]
    BranchAmbiguity { min_overlap: f64 },

    #[error("structured perturbation S(delta) is undefined at delta = 0")]
    ZeroDelta,

    #[error("fitted slope a = 1: fitted curve is parallel to the identity line")]
    DegenerateSlope,

    #[error("insufficient data: {got} valid points, need at least {need}")]
    InsufficientData { got: usize, need: usize },

    #[error("density matrix has trace {0}, expected 1")]
    NonUnitTrace(f64),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("eigenvalue solver did not converge")]
    NoConvergence,

    #[error("no controller available: {0}")]
    NoController(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
