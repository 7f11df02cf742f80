use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("invalid config: `{field}` {detail}")]
    InvalidConfig { field: String, detail: String },
    #[error("every pixel carries the ignore label; nothing to supervise")]
    EmptySupervision,
    #[error("mIoU undefined: no class has a non-empty union")]
    UndefinedMiou,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("non-finite gradient for parameter `{path}`")]
    NonFiniteGradient { path: String },
    #[error("training diverged at step {step}: total loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("{what}: {samples} samples is not more than {features} features")]
    InsufficientSamples {
        what: &'static str,
        samples: usize,
        features: usize,
    },
    #[error("unknown fuse mode `{0}`")]
    UnknownFuseMode(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PcaError> = std::result::Result<T, E>;

pub(crate) fn bad_config(field: &str, detail: impl Into<String>) -> PcaError {
    PcaError::InvalidConfig {
        field: field.to_string(),
        detail: detail.into(),
    }
}
