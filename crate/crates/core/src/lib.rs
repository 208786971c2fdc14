//! Kernel activation functions (KAF, 2-D KAF) inside Siamese and matching
//! networks for one-shot metric learning.
//!
//! Everything is implemented from scratch on a small dense [`Tensor`] type
//! with hand-written backward passes; [`gradcheck`] supplies the
//! finite-difference oracle used to verify them.

pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kaf;
pub mod layer;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
