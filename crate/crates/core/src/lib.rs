//! Diffusion-based 9-DoF category-level object pose and size estimation.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`pose`]: pose types, SO(3) utilities, and the normalized 15-value
//!   diffusion state.
//! - [`schedule`]: variance schedule, forward noising, DDPM/DDIM reverse
//!   steps, and the sampling loop.
//! - [`condition`]: image/point/time-step/shape condition encoders and the
//!   shape reconstruction losses.
//! - [`denoiser`]: the self-attention noise predictor.
//! - [`model`]: the assembled estimator plus checkpoint I/O.
//! - [`datagen`]: procedural synthetic scenes and the on-disk dataset format.
//! - [`trainer`]: combined-loss optimization with a cyclic learning rate.
//! - [`eval`]: oriented-box IoU, rotation/translation criteria, report
//!   aggregation, and Umeyama alignment.
//! - [`grasp`]: transform chains and the predefined-vector grasp strategy.

pub mod condition;
pub mod datagen;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod grasp;
pub mod model;
pub mod nn;
pub mod pose;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
