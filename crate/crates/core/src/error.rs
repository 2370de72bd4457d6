use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("dimension mismatch on contracted axes: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("factorization mismatch: factors {factors:?} multiply to {product}, expected {expected}")]
    FactorizationMismatch {
        factors: Vec<usize>,
        product: usize,
        expected: usize,
    },
    #[error("dimension {rows}x{cols} exceeds the oracle guard of {limit} entries")]
    DimTooLarge { rows: usize, cols: usize, limit: usize },
    #[error("contraction cache has no entry for example {example}, token {token}")]
    CacheMissing { example: usize, token: usize },
    #[error("clip coefficients belong to batch {expected}, got batch {actual}")]
    StaleCoefficients { expected: u64, actual: u64 },
    #[error("value out of range: {0}")]
    InvalidRange(String),
    #[error("sigma calibration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged: loss is {0}")]
    Divergence(f64),
    #[error("privacy budget exceeded: epsilon {spent} > target {target}")]
    PrivacyBudgetExceeded { spent: f64, target: f64 },
    #[error("no data to evaluate")]
    EmptyData,
    #[error("need at least {needed} examples, got {got}")]
    TooSmall { needed: usize, got: usize },
    #[error("vocabulary mismatch: {0} vs {1} tokens")]
    VocabMismatch(usize, usize),
    #[error("score list is empty")]
    EmptyScores,
    #[error("false-positive rate {0} outside (0, 1]")]
    AlphaOutOfRange(f64),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
