//! DiffMOD: a progressive point-denoising detector for moving objects.
//!
//! Sparse noisy points are iteratively refined toward moving-object centers
//! by a stack of denoising levels (relation-aware attention, dynamic feature
//! interaction, timestep scaling), trained with MinK optimal-transport
//! assignment and a missing loss, and evaluated on synthetic moving-object
//! video generated by this crate.

pub mod error;

pub mod numerics;
pub mod assign;
pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod features;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod scenegen;
pub mod sraa;
pub mod tpgf;

pub use error::{Error, Result};
