//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 1..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },

    #[error("{what}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("invalid value for config key `{key}`: {reason}")]
    BadConfigValue { key: String, reason: String },

    #[error("manifest record {index}: {reason}")]
    ManifestRecord { index: usize, reason: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("label {label:?} contains character {ch:?} outside the alphabet")]
    OutOfAlphabet { label: String, ch: char },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step} (dm={loss_dm}, recog={loss_recog})")]
    NonFiniteLoss {
        step: usize,
        loss_dm: f64,
        loss_recog: f64,
    },

    #[error("{0}")]
    Msg(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn msg(m: impl Into<String>) -> Self {
        Error::Msg(m.into())
    }
}
