//! Minimal dense/convolutional network stack with reverse-mode gradients.
//!
//! Everything is an explicit layer with a `forward` that caches what its
//! `backward` needs; a [`Net`] is a plain sequence of layers. Tensors are
//! row-major `f64` buffers with a batch-first shape convention: `(N, ...)`.
//! Two builders assemble the generator and discriminator stacks used by the
//! trainer; their configs are validated shape-by-shape before any parameter
//! is allocated, so a successful build never hits a runtime shape error on
//! correctly-shaped input.

mod layers;
mod loss;
mod net;
mod tensor;

pub use layers::{
    binarize, conv2d, dense, leaky_relu, maxpool2d, sigmoid, softmax, upsample2d, Activation,
    BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, Mode, Reshape, UpSample2D,
};
pub use loss::{
    loss_discriminator, loss_discriminator_grads, loss_generator, loss_generator_grad,
    PROB_EPSILON,
};
pub use net::{
    build_discriminator, build_generator, load_checkpoint, reference_discriminator_config,
    reference_generator_config, save_checkpoint, Adam, DiscriminatorConfig, GeneratorConfig,
    Net, NetSummary, CHECKPOINT_MAGIC,
};
pub use tensor::Tensor;

use std::fmt;

/// Errors produced by tensor ops, builders and checkpoint IO.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NnError {
    /// An operation received a tensor whose shape it cannot consume.
    ShapeMismatch { op: &'static str, detail: String },
    /// A net config fails its cross-checks or does not compose.
    ConfigInvalid { reason: String },
    /// A numeric input is outside the operation's domain.
    DomainError { reason: String },
    /// A checkpoint could not be written or read back.
    Checkpoint { reason: String },
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            NnError::ConfigInvalid { reason } => write!(f, "invalid net config: {reason}"),
            NnError::DomainError { reason } => write!(f, "domain error: {reason}"),
            NnError::Checkpoint { reason } => write!(f, "checkpoint error: {reason}"),
        }
    }
}

impl std::error::Error for NnError {}
