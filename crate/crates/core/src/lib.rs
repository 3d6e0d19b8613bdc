//! Crowd-counting ground truth toolkit.
//!
//! Converts head-point annotations into density maps, applies the per-dataset
//! sizing rules, transforms labels (sum-preserving down-sampling and scalar
//! normalization), scores predictions and keeps an append-only experiment log.
//!
//! Module map:
//!
//! - [`ingest`]: annotation interchange files and the per-dataset rule registry.
//! - [`density`]: Gaussian kernels, kNN geometry, rendering and the C3DM format.
//! - [`preprocess`]: resize planning, point rescaling, batch collation plans, crops.
//! - [`labels`]: down-sampling, normalization and count extraction.
//! - [`metrics`]: MAE / MSE over counts, PSNR / SSIM over maps, run evaluation.
//! - [`expdb`]: JSON-lines experiment store.
//! - [`cli`]: the `crowdkit` command-line driver.

pub mod cli;
pub mod density;
pub mod expdb;
pub mod ingest;
pub mod labels;
pub mod metrics;
pub mod preprocess;
mod sum;

pub use density::{DensityMap, KernelMode, KernelSpec};
pub use ingest::{AnnotationSet, DatasetId, Point};
pub use preprocess::{ResizePlan, ResizeRule};
pub use sum::compensated_sum;
