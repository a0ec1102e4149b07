//! Calibration of learning-to-rank scores into click probabilities.
//!
//! The crate covers the whole pipeline: a small dense-network engine, a
//! pairwise-trained ranker, the calibrators (Platt, smoothed isotonic,
//! field-wise Wilson correction and the context-aware monotone MLPlatt head),
//! calibration and ranking metrics, a synthetic data generator, the dataset
//! file format and the experiment harness behind the command-line tool.

pub mod bench;
pub mod calibrators;
pub mod container;
pub mod datagen;
pub mod dataio;
mod error;
pub mod metrics;
pub mod nn;
pub mod ranker;

pub use error::{Error, Result};
