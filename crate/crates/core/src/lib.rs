//! Algorithmic core of a Semantic-ID generative recommender that reads a
//! user's long history through two channels: a tier-histogram token in the
//! encoder and a retrieval stream gated into every decoder block.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, configuration
//! and the command line live in the companion `glass` crate.

#![no_std]

extern crate alloc;

pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod quantizer;
pub mod search;
pub mod sidtier;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
