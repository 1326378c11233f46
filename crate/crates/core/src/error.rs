use thiserror::Error;

use crate::autodiff::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("tensor extents must be positive, got {0:?}")]
    ZeroExtent(Vec<usize>),

    #[error("shape mismatch at node {node}: {msg}")]
    Shape { node: NodeId, msg: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown input `{0}`")]
    UnknownInput(String),

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("output index {index} out of range for output of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("tape was not produced by this graph")]
    TapeMismatch,

    #[error("invalid model config at layer {layer}: {msg}")]
    LayerConfig { layer: usize, msg: String },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("layer selector `{0}` does not resolve to a layer")]
    UnknownLayer(String),

    #[error("layer `{0}` does not produce a (h, w, K) feature-map stack")]
    NotFeatureMaps(String),

    #[error("model has no softmax output")]
    NoSoftmax,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
