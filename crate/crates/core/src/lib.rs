//! Desk-scale laboratory for post-training pruning of a small decoder-only
//! transformer: calibration statistics, Wanda / SparseGPT / RIA saliency,
//! unstructured and N:M masks with channel permutation, OBS compensation,
//! neuron semantic attribution and a likelihood-based evaluation harness.

pub mod calib;
pub mod error;
pub mod eval;
pub mod fixture;
mod framing;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nsa;
pub mod pipeline;
pub mod report;
pub mod sparsify;
pub mod util;

pub use error::{Error, FormatError, Result};
pub use linalg::Matrix;
