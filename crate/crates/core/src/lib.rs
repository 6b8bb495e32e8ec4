//! Debiasing on datasets that carry both a spurious bias attribute and label
//! noise: a prejudice model absorbs the bias, its prediction entropy drives a
//! resampling distribution, and a noise-robust learner trains on the
//! resampled batches.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod container;
pub mod datasets;
pub mod error;
pub mod gmm;
pub mod losses;
pub mod nnkit;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
