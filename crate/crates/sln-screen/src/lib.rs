//! Rapid metastasis screening over stained-tissue image patches.
//!
//! The pipeline: a small convolutional network classifies 100x100 RGB
//! patches into four diagnostic categories; categories are grouped into
//! the clinical binary (negative vs positive); five patches per slide are
//! combined by majority vote into a case-level call; and the diagnostic
//! statistics (accuracy, sensitivity, specificity, PPV, NPV) are carried
//! as exact rationals. A procedural generator stands in for patient data.
//!
//! Batch-level work (forward/backward over samples, split evaluation) is
//! data-parallel via rayon under the default `parallel` feature; building
//! with `--no-default-features` gives a sequential core with identical
//! (bit-for-bit) results.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fixtures;
pub mod gradcheck;
mod matmul;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod ppm;
pub mod synth;
mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Padding, Scalar, Tensor};

/// Cap the rayon thread pool (no-op without the `parallel` feature).
/// Call once, before any parallel work.
#[cfg(feature = "parallel")]
pub fn set_threads(threads: usize) -> std::result::Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
}
