//! Raster data model and the non-neural stages of the avalanche debris pipeline:
//! SAR change features, terrain (slope, release zones, PAR), synthetic scenes,
//! training patches, debris segments and evaluation metrics.

pub mod dataset;
pub mod dihedral;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod radiometry;
pub mod raster;
pub mod scene_io;
pub mod segments;
pub mod synth;
pub mod terrain;

pub use error::{Error, Result};
pub use raster::{GeoTransform, Raster, RasterGrid};
