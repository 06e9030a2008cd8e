//! Spatial-pyramid VLAD image representations from region descriptors.
//!
//! The pipeline turns a set of per-region CNN descriptors into one compact
//! vector per image:
//!
//! 1. [`pca`] reduces descriptor dimensionality (trained on a sampled
//!    subset, applied everywhere),
//! 2. [`codebook`] learns k-means codewords in the reduced space,
//! 3. [`encoder`] aggregates per-region residuals into one normalized VLAD
//!    block per spatial pyramid cell and concatenates the blocks.
//!
//! [`ingest`] persists datasets, models, and encodings in deterministic
//! little-endian binary formats; [`synthbench`] generates synthetic scenes
//! whose classes differ only in local layout and measures how well encodings
//! separate them.

pub mod codebook;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod ingest;
pub mod pca;
pub mod synthbench;

pub use codebook::{Codebook, LloydRun, TrainParams};
pub use datamodel::{
    EncodedRepresentation, ImageRecord, PyramidSpec, RegionDescriptor, Violation,
};
pub use error::{Error, Result};
pub use pca::PcaModel;
