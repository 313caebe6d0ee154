//! Patch-based land-cover classification of multispectral rasters.
//!
//! A random forest scores square patches at several scales, the per-scale
//! probability grids are averaged, and the result is snapped to image
//! regions from a graph segmentation by majority vote.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod exec;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod probmap;
pub mod raster;
pub mod sampling;
pub mod segment;
pub mod synthgen;

pub use exec::Execution;
pub use raster::{LabelMask, Raster};
