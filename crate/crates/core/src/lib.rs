//! Masked multi-scale feature reconstruction for unsupervised visual anomaly
//! detection.
//!
//! A vision transformer sees only a random subset of image patches, mask
//! tokens stand in for the rest, and a simple feature pyramid decodes the
//! token grid into multi-scale maps that must match a frozen convolutional
//! teacher run on the whole image. At test time nothing is masked and the
//! per-position disagreement between student and teacher is the anomaly map.

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod fpn;
pub mod heatmap;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod resample;
pub mod scoring;
pub mod train;

pub use error::{MmrError, Result};
