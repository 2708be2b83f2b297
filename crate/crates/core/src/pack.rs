//! Tokenization stream and fixed-length chunk packing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::corpus::SentenceRecord;
use crate::error::{Error, Result};
use crate::tokenizer::TokenizerAdapter;
use crate::Origin;

pub const DEFAULT_CHUNK_LEN: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub encoded: u64,
    pub tokens: u64,
    pub empty: u64,
    pub failed: u64,
}

/// Lazily encodes records, dropping (and counting) empty encodings and adapter failures.
pub struct EncodeStream<'t, I> {
    records: I,
    tok: &'t dyn TokenizerAdapter,
    pub stats: EncodeStats,
    pub failed_ids: Vec<String>,
}

impl<I> Iterator for EncodeStream<'_, I>
where
    I: Iterator<Item = SentenceRecord>,
{
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        for rec in self.records.by_ref() {
            match self.tok.encode(&rec.text) {
                Ok(ids) if ids.is_empty() => self.stats.empty += 1,
                Ok(ids) => {
                    self.stats.encoded += 1;
                    self.stats.tokens += ids.len() as u64;
                    return Some(ids);
                }
                Err(_) => {
                    self.stats.failed += 1;
                    self.failed_ids.push(rec.id);
                }
            }
        }
        None
    }
}

pub fn encode_stream<I>(records: I, tok: &dyn TokenizerAdapter) -> EncodeStream<'_, I::IntoIter>
where
    I: IntoIterator<Item = SentenceRecord>,
{
    EncodeStream {
        records: records.into_iter(),
        tok,
        stats: EncodeStats::default(),
        failed_ids: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackConfig {
    pub chunk_len: usize,
    pub pad_id: u32,
    /// Inserted between consecutive sequences when set.
    pub delimiter_id: Option<u32>,
    /// `(cls, sep)` framing around every chunk when set.
    pub frame_ids: Option<(u32, u32)>,
}

impl PackConfig {
    /// Plain packing (no delimiter, no framing) for the tokenizer's pad id.
    pub fn for_tokenizer(tok: &dyn TokenizerAdapter, chunk_len: usize) -> Self {
        Self {
            chunk_len,
            pad_id: tok.special_ids().pad,
            delimiter_id: None,
            frame_ids: None,
        }
    }

    pub fn with_delimiter(mut self, tok: &dyn TokenizerAdapter) -> Result<Self> {
        self.delimiter_id = Some(
            tok.special_ids()
                .delimiter
                .ok_or_else(|| Error::config("tokenizer has no delimiter token"))?,
        );
        Ok(self)
    }

    pub fn with_framing(mut self, tok: &dyn TokenizerAdapter) -> Result<Self> {
        let ids = tok.special_ids();
        match (ids.cls, ids.delimiter) {
            (Some(cls), Some(sep)) => self.frame_ids = Some((cls, sep)),
            _ => return Err(Error::config("tokenizer lacks [CLS]/[SEP] tokens for framing")),
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let min = if self.frame_ids.is_some() { 3 } else { 2 };
        if self.chunk_len < min {
            return Err(Error::config(format!(
                "chunk_len {} is below the minimum of {min}",
                self.chunk_len
            )));
        }
        Ok(())
    }

    fn content_len(&self) -> usize {
        self.chunk_len - if self.frame_ids.is_some() { 2 } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenChunk {
    pub ids: Vec<u32>,
    /// False only on the trailing padding.
    pub attention: Vec<bool>,
    pub origin: Origin,
}

impl TokenChunk {
    pub fn from_ids(ids: Vec<u32>, pad_id: u32, origin: Origin) -> Self {
        let attention = ids.iter().map(|&id| id != pad_id).collect();
        Self { ids, attention, origin }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padding(&self) -> usize {
        self.attention.iter().filter(|a| !**a).count()
    }

    /// Check the shape and padding-suffix invariants.
    pub fn check(&self, chunk_len: usize, pad_id: u32) -> Result<()> {
        if self.ids.len() != chunk_len || self.attention.len() != chunk_len {
            return Err(Error::integrity(format!(
                "chunk {:?} has length {}, expected {chunk_len}",
                self.origin,
                self.ids.len()
            )));
        }
        let valid = self.attention.iter().take_while(|a| **a).count();
        if self.attention[valid..].iter().any(|a| *a) {
            return Err(Error::integrity(format!("chunk {:?} has interior padding", self.origin)));
        }
        for (id, att) in self.ids.iter().zip(&self.attention) {
            if *att == (*id == pad_id) {
                return Err(Error::integrity(format!(
                    "chunk {:?}: attention disagrees with pad id",
                    self.origin
                )));
            }
        }
        Ok(())
    }
}

/// Concatenates sequences and slices them into `chunk_len` windows; only the
/// final window is padded.
pub struct Packer<I> {
    seqs: I,
    cfg: PackConfig,
    shard: u32,
    next_chunk: u32,
    buf: VecDeque<u32>,
    started: bool,
    exhausted: bool,
}

impl<I> Packer<I>
where
    I: Iterator<Item = Vec<u32>>,
{
    fn emit(&mut self, take: usize) -> TokenChunk {
        let mut ids = Vec::with_capacity(self.cfg.chunk_len);
        if let Some((cls, _)) = self.cfg.frame_ids {
            ids.push(cls);
        }
        ids.extend(self.buf.drain(..take));
        if let Some((_, sep)) = self.cfg.frame_ids {
            ids.push(sep);
        }
        ids.resize(self.cfg.chunk_len, self.cfg.pad_id);
        let origin = Origin::new(self.shard, self.next_chunk);
        self.next_chunk += 1;
        TokenChunk::from_ids(ids, self.cfg.pad_id, origin)
    }
}

impl<I> Iterator for Packer<I>
where
    I: Iterator<Item = Vec<u32>>,
{
    type Item = TokenChunk;

    fn next(&mut self) -> Option<TokenChunk> {
        let want = self.cfg.content_len();
        while self.buf.len() < want && !self.exhausted {
            match self.seqs.next() {
                Some(seq) if seq.is_empty() => {}
                Some(seq) => {
                    if let (true, Some(d)) = (self.started, self.cfg.delimiter_id) {
                        self.buf.push_back(d);
                    }
                    self.started = true;
                    self.buf.extend(seq);
                }
                None => self.exhausted = true,
            }
        }
        if self.buf.is_empty() {
            return None;
        }
        let take = want.min(self.buf.len());
        Some(self.emit(take))
    }
}

/// Pack one shard's sequences; chunk indices restart at 0 for every shard.
pub fn pack<I>(seqs: I, cfg: PackConfig, shard: u32) -> Result<Packer<I::IntoIter>>
where
    I: IntoIterator<Item = Vec<u32>>,
{
    cfg.validate()?;
    Ok(Packer {
        seqs: seqs.into_iter(),
        cfg,
        shard,
        next_chunk: 0,
        buf: VecDeque::new(),
        started: false,
        exhausted: false,
    })
}

/// Recover the packed token stream: drops padding, delimiters and framing.
pub fn unpack_tokens(chunks: &[TokenChunk], cfg: &PackConfig) -> Vec<u32> {
    let mut out = Vec::new();
    for c in chunks {
        let valid = c.attention.iter().filter(|a| **a).count();
        let body = match cfg.frame_ids {
            Some(_) => &c.ids[1..valid - 1],
            None => &c.ids[..valid],
        };
        out.extend(body.iter().copied().filter(|&id| Some(id) != cfg.delimiter_id));
    }
    out
}
