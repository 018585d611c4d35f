//! Distance-from-boundary (DfB) priors for patch-based segmentation of whole
//! slide images.
//!
//! The pipeline runs in stages:
//!
//! 1. [`imgproc`] downscales a slide raster and segments tissue by HSV
//!    thresholding followed by small-object removal and hole filling.
//! 2. [`distance`] turns the tissue mask into a DfB image with a two-pass
//!    (3,4) chamfer transform, with an exact Euclidean transform alongside.
//! 3. [`tiling`] cuts the slide into patches, pools the mean DfB of each
//!    patch and keeps the single-class ones.
//! 4. [`dataset`] builds slide-disjoint folds, balances classes and flips
//!    tiles for augmentation.
//! 5. [`model`] is a small convolutional classifier that can take the DfB
//!    prior as an extra input channel or as an extra feature before the
//!    fully connected head, optionally initialised from a trained baseline.
//! 6. [`metrics`] scores predictions and bins recall by distance.
//!
//! [`synth`] renders synthetic slides whose lesions sit near the tissue
//! boundary, and [`experiment`] wires everything into a cross-validated
//! comparison of the fusion arms.

pub mod dataset;
pub mod distance;
pub mod error;
pub mod experiment;
pub mod imgproc;
pub mod io;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tiling;

pub use crate::distance::DfbImage;
pub use crate::error::{Error, Result};
pub use crate::imgproc::{BinaryMask, HsvThresholds, RgbImage};
pub use crate::tiling::{ClassLabel, LabelImage, PatchRecord, PatchRect};
