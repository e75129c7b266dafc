use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("clip too short: {samples} samples but one {window}-sample analysis window is required")]
    ClipTooShort { samples: usize, window: usize },

    #[error("feature map has {frames} frames but the encoder needs at least {min_frames}")]
    TooFewFrames { frames: usize, min_frames: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("label {label} out of range 1..={max}")]
    LabelOutOfRange { label: usize, max: usize },

    #[error("non-finite loss at epoch {epoch}, episode {episode} (local {local}, global {global})")]
    NonFiniteLoss {
        epoch: usize,
        episode: usize,
        local: f64,
        global: f64,
    },

    #[error("manifest errors:\n  {}", .0.join("\n  "))]
    Manifest(Vec<String>),

    #[error("missing embeddings for clips: {}", .0.join(", "))]
    MissingClips(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::ClipTooShort { .. } => "clip_too_short",
            Error::TooFewFrames { .. } => "too_few_frames",
            Error::Shape(_) => "shape",
            Error::Degenerate(_) => "degenerate",
            Error::Insufficient(_) => "insufficient_data",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Manifest(_) => "manifest",
            Error::MissingClips(_) => "missing_clips",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Wav { .. } => "wav",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
