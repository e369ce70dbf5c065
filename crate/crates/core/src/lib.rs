//! Allocation-only core of a retrieval engine built on reusable recurrent states.
//!
//! A recurrent backbone with matrix-valued states produces, in one pass over
//! a document, both an embedding and a reusable [`rwkv::StateStack`]. The
//! reranker later resumes from that stack, feeding only query tokens, so its
//! cost does not depend on document length.
//!
//! No I/O lives here; file formats, the pipeline and the CLI are in the
//! `staterank` crate.
#![no_std]
#![allow(clippy::needless_range_loop)]
extern crate alloc;

pub mod curriculum;
pub mod embedder;
pub mod error;
pub mod params;
pub mod reranker;
pub mod rwkv;
pub mod state_store;
pub mod tensor;

pub use error::{Error, Result};
pub use params::Params;
