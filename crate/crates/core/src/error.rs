use thiserror::Error;

pub type Result<T> = std::result::Result<T, FpcaError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpcaError {
    #[error("no samples")]
    NoSamples,
    #[error("degenerate time domain")]
    DegenerateDomain,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("time out of domain: {time} not in [{lo}, {hi}]")]
    TimeOutOfDomain { time: f64, lo: f64, hi: f64 },
    #[error("invalid sample {subject}: {reason}")]
    InvalidSample { subject: String, reason: String },
    #[error("degenerate design")]
    DegenerateDesign,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("degenerate covariance")]
    DegenerateCovariance,
    #[error("singular subject covariance for {0}")]
    SingularSubjectCovariance(String),
    #[error("insufficient pairs: no subject has two or more observations")]
    InsufficientPairs,
    #[error("no within-group variation")]
    NoWithinGroupVariation,
    #[error("nonpositive variance at grid point {0}")]
    NonpositiveVariance(usize),
    #[error("need at least 2 groups")]
    NotEnoughGroups,
    #[error("group {group} has {size} subjects, need at least {needed}")]
    GroupTooSmall {
        group: String,
        size: usize,
        needed: usize,
    },
    #[error("group {group} too small for {k} folds ({size} subjects)")]
    TooSmallForFolds {
        group: String,
        size: usize,
        k: usize,
    },
    #[error("subject {0} has no group label")]
    MissingGroup(String),
    #[error("empty test fold {0}")]
    EmptyTestFold(usize),
    #[error("no eligible subjects")]
    NoEligibleSubjects,
    #[error("duplicate group label {0}")]
    DuplicateLabel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("serialization: {0}")]
    Serialization(String),
}

impl FpcaError {
    pub(crate) fn invalid_sample(subject: &str, reason: impl Into<String>) -> Self {
        FpcaError::InvalidSample {
            subject: subject.to_string(),
            reason: reason.into(),
        }
    }
}
