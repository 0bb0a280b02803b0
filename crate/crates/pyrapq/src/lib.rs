//! Learnable product-quantization retrieval over pyramid feature maps.
//!
//! The pipeline: generalized spatial pooling fuses three stages of
//! precomputed (or synthetic) activation maps into one embedding; a trained
//! codebook soft-quantizes it through partial top-kappa attention during
//! training and hard-encodes it to `m * ceil(log2 k)` bits for the database;
//! retrieval scores queries against codes via a per-query lookup table
//! (asymmetric quantizer distance) and is evaluated with MAP / P@N.
//!
//! Batch-level loops (encoding, search, per-sample gradients, sweeps) run on
//! rayon under the default `parallel` feature and fall back to sequential
//! iteration without it; results are bitwise identical either way.

pub mod bits;
pub mod dataio;
pub mod error;
mod exec;
pub mod experiment;
pub mod losses;
pub mod numerics;
pub mod pooling;
pub mod quantization;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
