//! Adversarial uncertainty sampling for pool-based active learning over a
//! latent vector space.
//!
//! Labeled points are pushed onto the decoder's decision boundary by an
//! adversarial attack, the boundary points are mapped back to real unlabeled
//! samples with exact nearest-neighbor search, and an entropy-ranked mixture
//! of those and random candidates is sent to the oracle.

pub mod active;
pub mod attacks;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod knn;
pub mod rng;
pub mod sampler;
pub mod store;

pub use error::{Error, Result};
