//! Tokenizer adapter contract and the bundled word-level tokenizer.
//!
//! Real subword tokenizers plug in by implementing [`TokenizerAdapter`].
//! The bundled [`WordTokenizer`] splits on whitespace and looks words up in
//! a vocabulary file with one token per line (line number = id). The first
//! five lines are always the special tokens `[PAD] [UNK] [MASK] [SEP] [CLS]`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const CLS_TOKEN: &str = "[CLS]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub mask: u32,
    pub unknown: u32,
    pub delimiter: Option<u32>,
    pub cls: Option<u32>,
}

impl SpecialIds {
    pub fn all(&self) -> Vec<u32> {
        let mut ids = vec![self.pad, self.mask, self.unknown];
        ids.extend(self.delimiter);
        ids.extend(self.cls);
        ids.sort_unstable();
        ids
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let ids = self.all();
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::config(format!(
                "special id {bad} is outside the vocabulary (size {vocab_size})"
            )));
        }
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config(format!("special ids are not distinct: {ids:?}")));
        }
        Ok(())
    }
}

pub trait TokenizerAdapter: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn special_ids(&self) -> SpecialIds;
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    fn decode(&self, ids: &[u32]) -> String;
    /// Stable digest identifying this vocabulary; stored in checkpoints.
    fn digest(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl WordTokenizer {
    pub const SPECIALS: [&'static str; 5] = [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN, SEP_TOKEN, CLS_TOKEN];

    /// Build from ordinary words; special tokens are prepended.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in Self::SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::config(format!(
                    "vocabulary line {} must be `{s}`",
                    i + 1
                )));
            }
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate().skip(Self::SPECIALS.len()) {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("vocabulary entry {id} is not a single word")));
            }
            if lookup.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::config(format!("vocabulary word `{tok}` appears twice")));
            }
        }
        Ok(Self { tokens, lookup })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).ctx(|| format!("reading vocabulary {}", path.display()))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).ctx(|| format!("writing vocabulary {}", path.display()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.lookup.get(word).copied()
    }
}

impl TokenizerAdapter for WordTokenizer {
    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn special_ids(&self) -> SpecialIds {
        SpecialIds {
            pad: 0,
            unknown: 1,
            mask: 2,
            delimiter: Some(3),
            cls: Some(4),
        }
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(text
            .split_whitespace()
            .map(|w| self.lookup.get(w).copied().unwrap_or(1))
            .collect())
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Resolve a tokenizer spec. Supported: `word:<vocab path>` or a bare vocabulary path.
pub fn resolve(spec: &str) -> Result<Box<dyn TokenizerAdapter>> {
    let path = spec.strip_prefix("word:").unwrap_or(spec);
    let path = PathBuf::from(path);
    if !path.exists() {
        return Err(Error::config(format!("tokenizer vocabulary `{}` not found", path.display())));
    }
    Ok(Box::new(WordTokenizer::load(&path)?))
}
