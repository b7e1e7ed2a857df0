//! Subject-invariant, class-relevant representation learning for
//! multi-channel time series.
//!
//! An encoder maps a trial to a local feature, a point-wise convolution splits
//! it into class-relevant and class-irrelevant halves, and three neural
//! mutual-information estimators shape training: one (behind gradient
//! reversal) pushes the halves apart, two (local and global) tie the
//! class-relevant half to the classifier-facing global feature.

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod miestim;
pub mod model;
pub mod parallel;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
