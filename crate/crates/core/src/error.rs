use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DTypeMismatch { expected: String, found: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("unknown tensor id {id} (tape holds {len} nodes)")]
    UnknownVar { id: usize, len: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("token id {token} at example {example}, position {position} is out of range (vocab_size {vocab_size})")]
    TokenOutOfRange {
        example: usize,
        position: usize,
        token: u32,
        vocab_size: usize,
    },

    #[error("label {label} at example {example} is out of range (n_classes {n_classes})")]
    LabelOutOfRange {
        example: usize,
        label: u32,
        n_classes: usize,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("neuron {0} is out of range for the model")]
    NeuronOutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss {loss} at step {step} (batch indices {batch:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        batch: Vec<usize>,
    },

    #[error("model hash mismatch: {0:016x} vs {1:016x}")]
    ModelHashMismatch(u64, u64),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("content hash mismatch: manifest says {expected:016x}, payload hashes to {actual:016x}")]
    HashMismatch { expected: u64, actual: u64 },

    #[error("unsupported format_version {0}")]
    UnsupportedVersion(u64),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::DTypeMismatch { .. } => "dtype_mismatch",
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::UnknownVar { .. } => "unknown_var",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Empty(_) => "empty_input",
            Error::NeuronOutOfRange(_) => "neuron_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::ModelHashMismatch(..) => "model_hash_mismatch",
            Error::Singular(_) => "singular_system",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Malformed(_) => "malformed",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
