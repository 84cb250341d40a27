//! ModelMix: few-scribble supervised segmentation by mixing encoder
//! convolution parameters across a pair of correlated tasks.
//!
//! Virtual models are built by convex interpolation of one randomly chosen
//! encoder convolution layer between two task-specific networks, and the
//! model set is regularized with supervised and unsupervised vicinal losses
//! on top of cutout/mixup image perturbations.
//!
//! The crate is organized around a small reverse-mode differentiable tensor
//! core ([`diffcore`]), a mini U-Net with an addressable encoder ([`nets`]),
//! the parameter mixer ([`mixer`]), the training objectives ([`losses`]),
//! image perturbations ([`augment`]), a synthetic correlated-task generator
//! ([`synthtasks`]), Dice/Hausdorff evaluation ([`metrics`]) and the
//! end-to-end trainer with its ablation runner ([`trainer`]).

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod diffcore;
mod error;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod nets;
pub mod rng;
pub mod synthtasks;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
