//! File formats, indexing pipeline, benchmarks and CLI support on top of
//! `staterank-core`.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod error;
pub mod formats;
pub mod fsio;
pub mod pipeline;

pub use error::{Error, Result};
pub use staterank_core as core;
