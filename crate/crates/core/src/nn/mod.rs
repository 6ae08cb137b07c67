//! Tensors, layers and the convolutional classifier.

mod tensor;

pub mod gradcheck;
pub mod layers;
pub mod model;

pub use gradcheck::{grad_check, grad_check_batch, layer_suite, model_check, GradCheckReport};
pub use layers::{one_hot, LrnParams};
pub use model::{argmax, CnnModel, Example, LayerOrder, NetConfig, StepStats, TrainConfig, HIDDEN_UNITS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value after {0}")]
    NonFinite(&'static str),
}
