//! Lightweight face-embedding toolkit: a small deterministic tensor engine for
//! the MobileFaceNet layer set, the MobileFaceNet / widened MobileFaceNet model
//! family, additive angular margin loss, SGD and sharpness-aware minimization,
//! identity datasets, and biometric verification metrics.

#![allow(clippy::needless_range_loop, clippy::large_enum_variant)]

pub mod app;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
