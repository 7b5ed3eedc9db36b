//! Cross-domain self-supervised representation learning through an
//! edge-like bridge domain.

pub mod ablation;
pub mod adversary;
pub mod bridge;
pub mod contrastive;
pub mod data;
pub mod edges;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
mod nn;
pub mod rng;
pub mod store;
pub mod train;

pub use error::{Error, Result};
pub use nn::images_to_tensor;
