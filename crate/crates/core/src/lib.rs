//! Multi-modal text-guided video temporal grounding.
//!
//! RGB, optical-flow and depth segment features are each conditioned on the
//! query sentence, fused with co-attentional transformer blocks and learned
//! per-video weights, and regressed to a normalized `(start, end)` interval.
//! A per-modality contrastive loss pulls together ground-truth segments of
//! videos that share an action category.
//!
//! All math is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases at the crate root pick one.

pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grounding;
pub mod lgi;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use contrastive::ActionLabel;
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use grounding::TimeInterval;
pub use modality::Modality;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
