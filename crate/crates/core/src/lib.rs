//! Few-shot style cloning on a desk-scale budget.
//!
//! The pipeline learns a style token for a small style set by textual
//! inversion on a small pixel-space diffusion model, augments the style set
//! with self- and cross-guided diffusion samples, trains an unpaired
//! translation network on the augmented set, and scores it with a Fréchet
//! distance and a perceptual distance over a fixed feature extractor.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod guidance;
pub mod image;
pub mod inversion;
pub mod linalg;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod translator;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use manifest::{DatasetManifest, ManifestEntry, Provenance, Split};
pub use tensor::Tensor;
