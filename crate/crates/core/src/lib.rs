//! Cross-lingual transfer training with an embedding push and an attention
//! pull, on a small transformer encoder with its own autodiff engine.

pub mod augmentation;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
