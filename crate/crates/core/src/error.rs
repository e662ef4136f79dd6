use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate batch: train-mode batch norm needs at least two values per channel")]
    DegenerateBatch,
    #[error("zero vector: row {row} has norm {norm:e}")]
    ZeroVector { row: usize, norm: f64 },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("only {eligible} eligible identities, {requested} requested")]
    InsufficientIdentities { eligible: usize, requested: usize },
    #[error("cannot decode image {path}: {reason}")]
    DecodeError { path: String, reason: String },
    #[error("bad image dimensions: {0}")]
    BadDimensions(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("too few pairs: {pairs} pairs for {folds} folds")]
    TooFewPairs { pairs: usize, folds: usize },
    #[error("insufficient impostor scores for FAR level {level:e}: have {have}")]
    InsufficientImpostors { level: f64, have: usize },
    #[error("probe label {0} not present in gallery")]
    LabelNotInGallery(usize),
    #[error("SER undefined: best subgroup has zero error")]
    SerUndefined,
    #[error("training loss diverged at epoch {epoch}: {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("missing metrics: {0}")]
    MissingMetrics(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("malformed data: {0}")]
    Data(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than data.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::InvalidParams(_)
        )
    }

    /// True for errors caused by missing, malformed or insufficient input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_)
                | Error::DecodeError { .. }
                | Error::BadDimensions(_)
                | Error::InsufficientIdentities { .. }
                | Error::TooFewPairs { .. }
                | Error::InsufficientImpostors { .. }
                | Error::LabelNotInGallery(_)
                | Error::CorruptCheckpoint(_)
                | Error::Io { .. }
        )
    }
}
