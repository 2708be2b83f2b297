//! Masked-language-model domain adaptation toolkit.
//!
//! The pipeline runs in stages: shard a sentence corpus ([`corpus`]), assign
//! records to train/validation/test ([`split`]), tokenize and pack them into
//! fixed-length chunks ([`pack`], [`chunkfile`]), apply seeded dynamic
//! masking ([`mask`]), fine-tune a model ([`train`]) and score models by
//! masked-token perplexity, top-k accuracy and paired win/loss tallies
//! ([`eval`], [`report`]).

use serde::{Deserialize, Serialize};

pub mod chunkfile;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod keyed;
pub mod mask;
pub mod model;
pub mod pack;
pub mod pipeline;
pub mod report;
pub mod split;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

/// Address of a chunk: shard index and chunk index within that shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Origin {
    pub shard: u32,
    pub chunk: u32,
}

impl Origin {
    pub fn new(shard: u32, chunk: u32) -> Self {
        Self { shard, chunk }
    }
}
