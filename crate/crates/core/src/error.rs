use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected \"LFA1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported LFA version {0} (this build reads version 1)")]
    UnsupportedVersion(u32),

    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated {
        section: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite feature value at frame {frame}, layer {layer}, dim {dim}")]
    NonFiniteFeature { frame: usize, layer: usize, dim: usize },

    #[error("invalid dataset: {0}")]
    Validation(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("activation cache does not belong to the current parameters")]
    StaleCache,

    #[error("dataset has no per-frame SNR")]
    MissingSnr,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("aggregator: {0}")]
    Aggregator(String),
}

impl Error {
    /// Numerical failures (exit code 3) as opposed to input problems (exit code 2).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_) | Error::Divergence { .. } | Error::NonFiniteLoss
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
