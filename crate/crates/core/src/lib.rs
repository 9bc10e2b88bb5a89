//! Unsupervised segmentation of 2D skeleton sequences into motion phases.
//!
//! Stage one trains a denoising spatio-temporal graph encoder ([`astgcn`]) on
//! corrupted pose windows. Stage two projects frame features ([`projector`]),
//! initializes class prototypes ([`clustering`]) and alternates structured
//! unbalanced optimal transport ([`sot`]) with pseudo-label training.
//! Predictions are scored with dataset-global Hungarian matching ([`metrics`]).

pub mod astgcn;
pub mod clustering;
pub mod metrics;
pub mod pose_io;
pub mod projector;
pub mod rng;
pub mod sot;
pub mod synth;
pub mod tape;
