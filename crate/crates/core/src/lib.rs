//! Multi-granular language learning objectives on fixed embeddings.
//!
//! The crate evaluates and differentiates a soft multi-label contrastive loss,
//! a point-wise binary cross-entropy, and a smooth-KL consistency term across
//! granularity levels, next to the single-label CLIP baseline. A small
//! projected gradient descent driver and retrieval metrics sit on top.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod annotations;
pub mod fixtures;
pub mod gradients;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod trainer;

use thiserror::Error;

pub use annotations::AnnotationError;
pub use gradients::GradientError;
pub use losses::LossError;
pub use metrics::MetricsError;
pub use numerics::mgem::MgemError;
pub use numerics::NumericsError;
pub use trainer::TrainerError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mgem(#[from] MgemError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Gradient(#[from] GradientError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
