//! Runtime input guard built on learned metric embeddings.
//!
//! A Siamese embedding decides whether an input is in-distribution, deviated
//! or out-of-distribution by its distance to the training set; deviated
//! inputs are relabeled with their nearest training sample under a second,
//! quadruplet-trained embedding.

pub mod analyzer;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod reflector;
pub mod rflx;
pub mod sampling;
pub mod transforms;

pub use error::{Error, Result};
