//! Shape-biased contrastive predictive coding for images.
//!
//! The pipeline: an image is cut into an overlapping patch grid, each patch
//! is encoded to a representation vector, and an attention-based
//! autoregressor predicts the representations of patches around a training
//! block. Texture-transformed variants of the image supply cross-texture
//! targets, steering the encoder toward shape rather than texture. Training
//! minimizes an InfoNCE-style contrastive loss combined across texture
//! variants with configurable weights.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub mod cli;
pub mod config;
pub mod imaging;
pub mod loss;
pub mod models;
pub mod sequencing;
pub mod synth;
pub mod training;
