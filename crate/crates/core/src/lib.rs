//! Bayesian generative uncertainty for small diffusion and flow-matching
//! models.
//!
//! The crate trains denoisers on low-dimensional data, builds an approximate
//! posterior over their weights (a deep ensemble or a last-layer Laplace
//! approximation), and scores every generated sample by the entropy of the
//! moment-matched posterior predictive obtained by regenerating the same noise
//! seed under posterior weight draws. Generations with high entropy can then
//! be filtered out and the remaining set evaluated with distribution-level
//! and sample-level metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod posterior;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
