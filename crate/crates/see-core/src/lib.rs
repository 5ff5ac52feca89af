//! Sparse event-based eye-tracking engine.
//!
//! Event streams are sliced into fixed-time clips and voxelized into sparse
//! tensors; a submanifold sparse CNN backbone (float or integer-only int8)
//! turns each clip into an embedding; a GRU + FC head regresses normalized
//! eye-center coordinates. A cycle-level dataflow latency model and an
//! architecture search harness sit on top of the same model description.

pub mod container;
pub mod dense;
pub mod engine;
pub mod error;
pub mod events;
pub mod head;
pub mod io;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod search;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
