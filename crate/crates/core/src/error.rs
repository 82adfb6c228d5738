use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: f64, classes: usize },
    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),
    #[error("modality count {0} unsupported (must be 1..=10)")]
    MTooLarge(usize),
    #[error("explicit subset list is empty")]
    EmptyExplicitList,
    #[error("product of experts needs at least one expert")]
    EmptyExpertList,
    #[error("no modality present")]
    NoModalityPresent,
    #[error("unsupported abstract mean kind")]
    UnsupportedKind,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("decoder for modality {0} needs a style latent")]
    MissingStyle(usize),
    #[error("non-finite loss in {term}")]
    NonFiniteLoss { term: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("posterior precision is singular")]
    SingularPrecision,
    #[error("grid too coarse: integral moved by {change:e} when doubling resolution")]
    GridTooCoarse { change: f64 },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("classifier for modality {modality} reached accuracy {accuracy:.4} < {threshold}")]
    ClassifierTooWeak {
        modality: usize,
        accuracy: f64,
        threshold: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
