//! Dynamic token pruning for plain vision-transformer semantic segmentation.
//!
//! A staged ViT whose per-stage heads grade token difficulty; confident
//! tokens exit early with their current label while the rest continue
//! through deeper layers. Includes the tensor/autodiff substrate, the
//! analytic cost model, and a synthetic benchmark harness.

pub mod bench;
pub mod checkpoint;
pub mod cost;
pub mod engine;
pub mod error;
pub mod heads;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
