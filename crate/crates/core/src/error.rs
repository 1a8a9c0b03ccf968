use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PuzzleError {
    #[error("difficulty must lie in [1, 2^255 - 1], got {0}")]
    InvalidDifficulty(String),
    #[error("target must lie in [1, 2^255 - 1], got {0}")]
    InvalidTarget(String),
    #[error("hashrate must be positive and finite, got {0}")]
    InvalidHashrate(f64),
    #[error("share is not 64 hex characters: {0:?}")]
    MalformedShare(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CookieError {
    #[error("{field} is {len} bytes, longer than the 65536-byte limit")]
    FieldTooLong { field: &'static str, len: usize },
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
    #[error("service key must be 64 hex characters")]
    BadKey,
    #[error("stored timeout is too far ahead of the clock; retry after {retry_after_ms} ms")]
    ClockSkew { retry_after_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PenaltyError {
    #[error("penalty parameters violate 0 < minh <= maxh <= minf < maxf: {0}")]
    Ordering(String),
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    Threshold(f64),
    #[error("growth rate must be positive, got {0}")]
    Growth(f64),
    #[error("fraud score must lie in [0, 1], got {0}")]
    Score(f64),
}

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training data must contain both fraud and honest examples")]
    SingleClass,
    #[error("k = {k} must be in 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("need at least two folds, got {0}")]
    BadFolds(usize),
    #[error("could not draw folds containing both classes after {0} attempts")]
    FoldResample(usize),
    #[error("feature vectors have mismatched dimensions")]
    Dimension,
    #[error("model file is malformed: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum HashrateError {
    #[error("solve time must be positive, got {0} s")]
    NonPositiveSolveTime(f64),
    #[error("profile table is empty")]
    EmptyTable,
    #[error("profile table: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Puzzle(#[from] PuzzleError),
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("user {0:?} is not registered")]
    UnknownUser(String),
    #[error("device {device:?} is not registered for user {user:?}")]
    UnknownDevice { user: String, device: String },
    #[error("{0}")]
    Conflict(String),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("retry after {retry_after_ms} ms")]
    RetryAfter { retry_after_ms: u64 },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cookie(#[from] CookieError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Hashrate(#[from] HashrateError),
    #[error("persistence: {0}")]
    Persist(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Stable machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownUser(_) | ServiceError::UnknownDevice { .. } => {
                "registration_required"
            }
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Malformed(_) => "malformed",
            ServiceError::RetryAfter { .. } => "retry_after",
            ServiceError::Cookie(CookieError::ClockSkew { .. }) => "retry_after",
            ServiceError::Cookie(_) => "malformed",
            ServiceError::Config(_) | ServiceError::Penalty(_) => "config",
            ServiceError::Classifier(_) | ServiceError::Hashrate(_) => "internal",
            ServiceError::Persist(_) | ServiceError::Io(_) => "storage",
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("log: {0}")]
    Csv(#[from] csv::Error),
    #[error("log has no rows to replay")]
    EmptyLog,
    #[error("no fraud workers in log")]
    NoWorkers,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
