//! Self-training toolkit for word-image recognition: synthetic data
//! generation, an attention-based recognizer, confidence-based pseudo-label
//! selection, consistency-regularized adaptation and evaluation.

pub mod augment;
pub mod charset;
pub mod cli;
pub mod config;
pub mod confidence;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod raster;
pub mod rng;
pub mod selftrain;
pub mod synth;
pub mod textcorpus;

pub use charset::Charset;
pub use error::{Error, Result};
pub use model::{ModelState, Prediction, RecognizerConfig};
pub use raster::WordImage;
