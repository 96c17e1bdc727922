//! Weakly-supervised classification of large tiled images from image-level
//! labels only.
//!
//! The pipeline treats an image as a bag of grid patches whose individual
//! labels are unknown. A patch-level classifier is trained at two scales
//! inside an EM loop: each M-step fits the classifier on the currently
//! selected (discriminative) patches, each E-step re-estimates the hidden
//! per-patch selection mask from cross-scale averaged probability maps,
//! Gaussian-smoothed and thresholded by the minimum of an image-level and a
//! class-level percentile. Image-level labels are then predicted by a second
//! stage: a multinomial logistic regression over concatenated class
//! histograms of patch predictions from four checkpoints, alongside the
//! classical voting / max-pooling / feature-pooling baselines.
//!
//! Everything is verifiable at desk scale: [`synth`] generates seeded slide
//! corpora with planted, spatially clustered discriminative regions and
//! known ground-truth patch labels, so selection quality and fusion behavior
//! can be measured exactly.
//!
//! Module map:
//! - [`synth`] — seeded synthetic corpus generation and corpus files
//! - [`patchio`] — two-scale grid extraction, validity filtering, augmentation
//! - [`classifier`] — softmax / MLP patch models trained by seeded SGD
//! - [`em`] — probability maps, smoothing, percentile selection, the EM driver
//! - [`fusion`] — class histograms, fusion model, aggregation baselines
//! - [`eval`] — grouped splits, accuracy / mAP / F-score / kappa
//! - [`dataset`] — prepared per-image grids and fusion hold-out flags

pub mod classifier;
pub mod dataset;
pub mod em;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod patchio;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use synth::{OracleMask, SlideImage};
