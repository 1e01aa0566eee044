use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("no masked positions")]
    NoMaskedPositions,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data validation: {0}")]
    DataValidation(String),

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("training diverged (non-finite loss); last finite epoch: {last_finite_epoch}")]
    Divergence { last_finite_epoch: usize },

    #[error("degenerate perturbation design: all samples identical")]
    DegenerateDesign,

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad user input rather than internal failures.
    /// The CLI maps these to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::DataValidation(_)
                | Error::MissingFile(_)
                | Error::ShapeMismatch { .. }
                | Error::IndexOutOfRange { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
