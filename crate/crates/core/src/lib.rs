//! Cross pseudo supervision for semi-supervised 3D medical image
//! segmentation, with a self-configuring residual U-Net backbone.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fingerprint;
pub mod inference;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod planner;
pub mod preprocess;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
