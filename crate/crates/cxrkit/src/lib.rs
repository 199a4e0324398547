//! Chest X-ray classification pipeline.
//!
//! The crate covers the full workflow for two-class (covid / normal)
//! screening of chest radiographs:
//!
//! - [`raster`]: 8-bit image representation, grayscale conversion, resizing,
//!   model normalization.
//! - [`enhance`]: the contrast-enhancement filter bank (histogram
//!   equalization is the pipeline default).
//! - [`seg`]: U-Net lung segmentation, mask post-processing, and masking.
//! - [`classify`]: the CNN model zoo, training, and prediction.
//! - [`explain`]: class-activation heatmaps, counterfactual maps, and the
//!   out-of-mask relevance audit.
//! - [`augment`]: the four augmentation strategies and the incremental
//!   augmentation sweep.
//! - [`metrics`]: confusion-matrix accounting and the diagnostic metric
//!   suite.
//! - [`dataset`]: manifests, balanced sampling, stratified splits, and batch
//!   preprocessing.
//! - [`pipeline`]: end-to-end orchestration with reproducible artifacts.
//!
//! See the `examples/` directory for one runnable program per capability;
//! the `cxrkit` binary exposes the same operations as subcommands.

pub mod augment;
pub mod cache;
pub mod classify;
pub mod cli;
pub mod dataset;
pub mod enhance;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod seg;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{ClassLabel, LabeledImage, RasterImage};
