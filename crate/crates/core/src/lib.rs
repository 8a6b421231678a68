//! Nuclei instance segmentation for H&E-stained cryosections with a three-branch
//! U-Net, marker-based watershed post-processing and instance-level metrics.

pub mod data;
pub mod error;
pub mod filters;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod stain;
pub mod types;

pub use error::{Error, Result};
