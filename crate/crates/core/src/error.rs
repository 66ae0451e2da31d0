use thiserror::Error;

use crate::gf2::Gf2Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Gf2(#[from] Gf2Error),
    #[error("noise rate {0} outside [0, 0.5)")]
    NoiseRate(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("not enough samples: {0}")]
    NotEnoughSamples(String),
    #[error("instance has no ground-truth secret")]
    MissingSecret,
    #[error("loss {0} has no gradient")]
    UnsupportedLoss(&'static str),
    #[error("loss domain violation: {0}")]
    LossDomain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
