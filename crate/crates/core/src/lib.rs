//! Few-shot image classification with per-instance weighted class representations.
//!
//! The pipeline embeds each image with a small convolutional backbone followed
//! by an attentional bilinear extractor, weighs the support instances of each
//! class with a small revaluing network, and classifies queries with a scaled
//! cosine classifier trained on a three-term joint loss.

pub mod abfe;
pub mod airn;
pub mod backbone;
pub mod data;
pub mod episodes;
pub mod error;
pub mod head;
pub mod kv;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
