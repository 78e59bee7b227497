//! Action-conditioned Transformer VAE for articulated-body motion synthesis.
//!
//! The crate covers the whole pipeline: rotation representations, a rigid
//! skeletal body model, the generative model and its ablation variants,
//! training objectives, a procedural action dataset, the optimization loop,
//! the recognition-model based metric stack, and the denoising / augmentation
//! use cases.

pub mod ablation;
pub mod applications;
pub mod body;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod par;
pub mod plot;
pub mod rotations;
pub mod training;

pub use error::{Error, Result};
