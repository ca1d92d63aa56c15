#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Vector quantization for autoencoders: fixed codebooks with
//! straight-through gradients and EMA learning, and an adaptive pool that
//! selects among codebooks of equal capacity per position.
//!
//! The crate is `no_std` with `alloc`. File formats, experiment drivers and
//! the command line live in the companion `aqvq` crate.

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod pool;
pub mod rng;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Precision};
pub use tensor::Tensor;
