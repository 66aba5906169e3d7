//! Test-time prompt tuning that erases spurious-feature decision shortcuts
//! in zero-shot vision-language classifiers, with the evaluation machinery
//! to measure it.
//!
//! The prompt's context vectors are tuned per test sample so that the model
//! predicts a uniform distribution on auxiliary images carrying only the
//! features to erase (background, corner patches, reference images), while
//! staying confident on the content to keep.

pub mod augment;
pub mod auxiliary;
pub mod baselines;
pub mod config;
pub mod dist;
pub mod eraser;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod objective;
pub mod s2e;
pub mod seed;
pub mod zeroshot;

pub use error::{Error, Result};
