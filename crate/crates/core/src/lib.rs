//! Quantification of pellet micrograph segmentations.
//!
//! Given expert-labeled and model-predicted class rasters of scanning electron
//! micrographs, this crate computes the evaluation metrics and microstructure
//! statistics used to compare them:
//!
//! * [`raster`] — class rasters, color palette, score stacks, file formats.
//! * [`prep`] — cropping, train/test splitting, chipping, flip augmentation.
//! * [`metrics`] — confusion-matrix metrics: precision/recall, the F_D score,
//!   pixel IoU, class-weighted variants, and the overall score.
//! * [`defect`] — dilation-based clustering of defect pixels, area/density
//!   statistics, and bounding-box IoU of nearest-centroid-matched defects.
//! * [`boundary`] — probabilistic Hough extraction of grain-boundary lines,
//!   on-boundary classification, and proportion tests.
//! * [`spatial`] — Ripley's K / H spatial statistics with translation edge
//!   correction, Monte-Carlo envelopes, and point-process generators.
//! * [`calibrate`] — density-ratio confidence calibration over model trials,
//!   geometric-mean aggregation, majority voting, and threshold filtering.
//! * [`synth`] — synthetic scene and benchmark generators.

pub mod boundary;
pub mod calibrate;
pub mod defect;
pub mod io;
pub mod kdtree;
pub mod metrics;
pub mod prep;
pub mod raster;
pub mod spatial;
pub mod stats;
pub mod synth;

pub use raster::{ClassId, Condition, ImageMeta, LabelMap, Micrograph, Palette, ScoreStack};
