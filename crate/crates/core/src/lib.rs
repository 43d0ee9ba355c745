//! Koopman-embedded transformers for safety-function transfer on the
//! Lorenz system.
//!
//! The crate is organised as a pipeline: [`sim`] integrates trajectories,
//! [`dataset`] splits and windows them, [`koopman`] and [`pca`] learn state
//! embeddings, [`transformer`] learns their dynamics, [`safety`] computes the
//! ground-truth safety function, [`transfer`] fits safety heads on top of the
//! pretrained transformers and [`stats`] compares the variants.

pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod koopman;
pub mod pca;
pub mod pipeline;
pub mod rng;
pub mod safety;
pub mod sim;
pub mod stats;
pub mod tensor;
pub mod transfer;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};

// Training allocates and frees many multi-megabyte buffers per step; the
// system allocator returns them to the kernel and pays page faults each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
