//! Synthesis of annotated mixed-population training data for semantic cell
//! segmentation, starting from image-level labels of homogeneous cultures.
//!
//! The crate is organised along the pipeline:
//!
//! 1. [`phantom`] renders synthetic homogeneous populations with exact truth.
//! 2. [`foreground`] extracts cell masks without supervision and stamps the
//!    image-level class onto them.
//! 3. [`mixer`] normalizes pairs of crops by their background statistics and
//!    composites them into annotated mixtures.
//! 4. [`segmenter`] trains a per-pixel classifier on those composites.
//! 5. [`metrics`] scores predictions with per-class accuracy and IoU.
//!
//! [`experiment`] wires all stages together reproducibly from a single seed.

pub mod config;
pub mod error;
pub mod experiment;
pub mod foreground;
pub mod imaging;
pub mod manifest;
pub mod metrics;
pub mod mixer;
pub mod overlay;
pub mod phantom;
pub mod rng;
pub mod segmenter;

pub use error::{Error, ErrorKind, Result};
pub use imaging::{BinaryMask, GradientField, Image, LabelMap};

/// Version string recorded in every provenance entry.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
