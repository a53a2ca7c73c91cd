//! Weakly supervised video anomaly detection and spatial localization over
//! precomputed frame and patch embeddings.
//!
//! The pipeline: [`sa2`] collapses each frame's patch grid using motion
//! weighted attention, [`temporal_adapter`] mixes frames by distance,
//! [`dual_branch`] scores frames with a linear head and against learnable
//! class prompts from [`prompt_bank`], and [`losses`] defines the training
//! objective optimized by [`trainer`]. [`spatial_localizer`] turns patch
//! embeddings into heatmaps and boxes without training, and [`metrics`]
//! scores both parts.

pub mod autodiff;
pub mod dual_branch;
pub mod error;
pub mod feature_io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod prompt_bank;
pub mod sa2;
pub mod spatial_localizer;
pub mod temporal_adapter;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
