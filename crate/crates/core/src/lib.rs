//! Skin lesion segmentation with a dilated-residual encoder and a pyramid-pooling
//! decoder, trained on a combined negative-log-likelihood and end-point-error loss.
//!
//! Everything runs on the CPU: a small dense tensor type ([`Tensor`]), a reverse-mode
//! [`Tape`], the network ([`network`]), the objective ([`loss`]), challenge metrics
//! ([`metrics`]), data ingestion and augmentation ([`data`]) and the optimization loop
//! with checkpoints ([`trainer`]).

pub mod autodiff;
pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Axis, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
