//! Training-free acceleration of alternating frame/global attention
//! aggregators: early global layers executed as frame attention, and global
//! attention over a grid-subsampled key/value set with diagonal and
//! mean-fill terms under one shared softmax.
//!
//! The crate ships a small deterministic aggregator to exercise these
//! mechanisms, an exact reference for the subsampled kernel, attention
//! probing tools, and a cost model plus benchmark harness.

pub mod aggregator;
pub mod analysis;
pub mod attention;
pub mod bench;
pub mod error;
pub mod model;
pub mod output;
pub mod rng;
pub mod sga;
pub mod subsample;
pub mod tensor;

pub use error::{Error, Result};
