//! Face representation augmentation.
//!
//! Synthesizes a new face embedding from a base embedding and a target
//! posture: a convolutional autoencoder compresses a binarized landmark image
//! into a pose latent, and a transformer combiner fuses that latent with the
//! base embedding into a unit-norm embedding with the target pose. Training
//! uses pixel BCE on the landmark reconstruction plus three triplet terms
//! against pose, identity and emotion negatives.

pub mod autodiff;
pub mod checkpoint;
pub mod combiner;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod linalg;
pub mod model;
pub mod objective;
pub mod params;
pub mod pose;
pub mod raster;
pub mod run;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{FraError, Result};
pub use tensor::Tensor;
