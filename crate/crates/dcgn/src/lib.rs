//! Hierarchical graph network over frame-feature sequences: cosine-affinity
//! graph layers with windowed pooling, shot-boundary detection by dynamic
//! programming, a mixture-of-experts classifier, and ranking metrics, plus
//! the training loop and binary file formats used by the `dcgn` CLI.

pub mod classifier;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod graph;
pub mod layers;
pub mod shots;
pub mod training;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{DcgnError, Result};
