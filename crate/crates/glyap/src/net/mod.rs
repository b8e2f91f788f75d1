//! Neural-network machinery: a reverse-mode tape, small MLPs with
//! task-specific output heads, first-order optimizers, and the training
//! loops that fit certificates and synthesize controllers.
//!
//! Everything here is deliberately small and deterministic: graphs are
//! rebuilt per batch (so data-dependent branching is exact rather than
//! smoothed), gradients are exact reverse-mode accumulations, and all
//! randomness flows through the splittable [`crate::rng::Rng`].

mod mlp;
mod optim;
mod tape;
mod train;

pub use mlp::{Head, Mlp};
pub use optim::{clip_global_norm, Adam, PlateauScheduler};
pub use tape::{sat_value as sat_scalar, softmax_scaled_value, wrap_to_pi, LossExpr, NodeId, Tape};
pub use train::{
    fit_discounted_value, grad_params, train_certificate, train_synthesis, weight_concentration,
    EpochStat, FitConfig, SynthesisResult, TrainConfig, TrainedCertificate,
};

use thiserror::Error;

/// Errors produced by network construction, evaluation, and training.
#[derive(Debug, Error)]
pub enum NetError {
    /// An input vector did not match the width the network expects.
    #[error("input width {got} does not match expected width {expected}")]
    WidthMismatch {
        /// Width the operation expects.
        expected: usize,
        /// Width that was supplied.
        got: usize,
    },
    /// The requested loss composition is not expressible on the tape.
    #[error("unsupported primitive in loss graph: {0}")]
    UnsupportedPrimitive(String),
    /// The training loss became NaN or infinite; training was aborted.
    #[error("non-finite loss {loss} at epoch {epoch}; training aborted")]
    NonFiniteLoss {
        /// Epoch index at which the loss degenerated.
        epoch: usize,
        /// The offending loss value.
        loss: f64,
    },
    /// A configuration value was out of range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
