//! Few-shot fine-grained image classification with a feature re-abstraction
//! embedding and a learnable non-linear data projection similarity.

pub mod engine;
pub mod error;
pub mod frae;
pub mod metric;
pub mod numeric;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
