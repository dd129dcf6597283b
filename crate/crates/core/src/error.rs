use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("operator is not Hermitian (defect {defect:.3e} relative to norm {norm:.3e})")]
    NotHermitian { defect: f64, norm: f64 },

    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),

    #[error("matrix exponential overflowed (scaled 1-norm {norm:.3e})")]
    ExpmOverflow { norm: f64 },

    #[error("step size rejected: {0}")]
    StepSize(String),

    #[error("Liouville dimension {dim} exceeds the dense cap {cap}")]
    LiouvilleCap { dim: usize, cap: usize },

    #[error("negative evolution time {0}")]
    NegativeTime(f64),

    #[error("invalid projector set: {0}")]
    InvalidProjectors(String),

    #[error("jump record must satisfy 0 <= t1 < ... < tN <= T")]
    UnorderedRecord,

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("history length {n} exceeds the enumeration cap {cap}")]
    HistoryCap { n: usize, cap: usize },

    #[error("history mismatch: {0}")]
    HistoryMismatch(String),

    #[error("zero-probability history; ratio undefined")]
    ZeroProbability,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T> = std::result::Result<T, Error>;
