use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("{component} output {value:?} lies outside its declared domain")]
    Domain { component: String, value: Vec<f64> },

    #[error("time index {t} outside 1..={horizon}")]
    TimeOutOfRange { t: usize, horizon: usize },

    #[error("branch from t={t} with horizon {h} runs past T={horizon}")]
    HorizonOverflow { t: usize, h: usize, horizon: usize },

    #[error("history window has {got} records, order requires {need}")]
    ShortHistory { got: usize, need: usize },

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix in {0}")]
    Singular(String),

    #[error("system is not stable (spectral radius {0})")]
    Unstable(f64),

    #[error("empty cell: {0}")]
    EmptyCell(String),

    #[error("weak first stage: difference {diff} does not exceed floor {floor}")]
    WeakFirstStage { diff: f64, floor: f64 },

    #[error("propensity {0} is not bounded away from 0 and 1")]
    Positivity(f64),

    #[error("degenerate assignment mechanism: {0}")]
    DegenerateSam(String),

    #[error("atom {0} never observed")]
    UnobservedAtom(String),

    #[error("tabular state count {count} exceeds cap {cap}")]
    StateCap { count: usize, cap: usize },

    #[error("loss table has no entry for {0}")]
    MissingLoss(String),

    #[error("zero kernel mass at evaluation point {0:?}")]
    ZeroKernelMass(Vec<f64>),

    #[error("relative IRF disagrees with Psi by {0:e}")]
    RelativeIrfMismatch(f64),

    #[error("io: {0}")]
    Io(String),

    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
