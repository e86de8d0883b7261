//! Multi-scale residual VQ tokenization, next-scale autoregressive generation
//! with windowed logit smoothing and stage-proportional guidance, perceptual
//! refinement, and a downstream augmentation benchmark for synthetic
//! functional-ultrasound-style images.

pub mod checkpoint;
pub mod config;
pub mod downstream;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pem;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod var;
pub mod vqvae;

pub use error::{Error, Result};
