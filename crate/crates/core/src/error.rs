use thiserror::Error;

/// Every failure the laboratory can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BnError {
    #[error("batch contains no samples")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("moment log is empty")]
    EmptyLog,
    #[error("batch of {0} element(s) is too small for a Bessel-corrected estimate")]
    DegenerateBatch(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("population contains no samples")]
    EmptyPopulation,
    #[error("no statistics available for mode {0}")]
    MissingStats(String),
    #[error("cache does not belong to the most recent forward pass")]
    StaleCache,
    #[error("invalid normalization plan: {0}")]
    InvalidPlan(String),
    #[error("per-domain statistics requested but no domain id was supplied")]
    MissingDomainId,
    #[error("invalid domain policy: {0}")]
    InvalidPolicy(String),
    #[error("config error: {0}")]
    ConfigParse(String),
    #[error("unknown scenario `{name}` (valid: {valid})")]
    UnknownScenario { name: String, valid: String },
    #[error("malformed csv: {0}")]
    MalformedCsv(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for BnError {
    fn from(e: std::io::Error) -> Self {
        BnError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, BnError>;
