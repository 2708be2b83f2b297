//! Seeded dynamic masking.
//!
//! Every draw is a pure function of `(seed, shard, chunk, position)`, so a
//! chunk's masked form does not depend on which other chunks are processed,
//! in what order, or on how many threads.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyed::{below, key, mix64, unit_f64};
use crate::pack::TokenChunk;
use crate::tokenizer::TokenizerAdapter;
use crate::Origin;

/// Label value for positions that are not supervised.
pub const IGNORE: u32 = u32::MAX;

const TAG_EPOCH: u64 = 0x4550_4F43_48; // "EPOCH"

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskPolicy {
    pub fn new(select_prob: f64, mask_frac: f64, random_frac: f64, keep_frac: f64) -> Result<Self> {
        let p = Self {
            select_prob,
            mask_frac,
            random_frac,
            keep_frac,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parse the `mask,random,keep` sub-policy string, e.g. `0.8,0.1,0.1`.
    pub fn with_sub(select_prob: f64, sub: &str) -> Result<Self> {
        let parts: Vec<f64> = sub
            .split(',')
            .map(|p| f64::from_str(p.trim()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("bad sub-policy `{sub}`: {e}")))?;
        match parts.as_slice() {
            [m, r, k] => Self::new(select_prob, *m, *r, *k),
            _ => Err(Error::config(format!("expected three sub-policy fractions, got `{sub}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.select_prob > 0.0 && self.select_prob <= 1.0) {
            return Err(Error::config(format!(
                "select_prob {} must be in (0, 1]",
                self.select_prob
            )));
        }
        for (name, v) in [("mask", self.mask_frac), ("random", self.random_frac), ("keep", self.keep_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} fraction {v} is outside [0, 1]")));
            }
        }
        let sum = self.mask_frac + self.random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mask/random/keep fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Vocabulary facts the masker needs: which ids are special and which may be drawn as replacements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVocab {
    pub vocab_size: usize,
    pub pad_id: u32,
    pub mask_id: u32,
    special: Vec<u32>,
    replacements: Vec<u32>,
}

impl MaskVocab {
    pub fn new(vocab_size: usize, pad_id: u32, mask_id: u32, mut special: Vec<u32>) -> Result<Self> {
        special.extend([pad_id, mask_id]);
        special.sort_unstable();
        special.dedup();
        if special.iter().any(|&s| s as usize >= vocab_size) {
            return Err(Error::config("special id outside the vocabulary"));
        }
        let replacements: Vec<u32> = (0..vocab_size as u32)
            .filter(|id| special.binary_search(id).is_err())
            .collect();
        if replacements.is_empty() {
            return Err(Error::config("vocabulary has no ordinary tokens"));
        }
        Ok(Self {
            vocab_size,
            pad_id,
            mask_id,
            special,
            replacements,
        })
    }

    pub fn from_tokenizer(tok: &dyn TokenizerAdapter) -> Result<Self> {
        let ids = tok.special_ids();
        ids.validate(tok.vocab_size())?;
        Self::new(tok.vocab_size(), ids.pad, ids.mask, ids.all())
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special.binary_search(&id).is_ok()
    }

    pub fn special_ids(&self) -> &[u32] {
        &self.special
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub input_ids: Vec<u32>,
    /// Original id at selected positions, [`IGNORE`] elsewhere.
    pub labels: Vec<u32>,
    pub attention: Vec<bool>,
    pub origin: Origin,
}

impl MaskedExample {
    pub fn new(input_ids: Vec<u32>, labels: Vec<u32>, pad_id: u32, origin: Origin) -> Self {
        let attention = input_ids.iter().map(|&id| id != pad_id).collect();
        Self {
            input_ids,
            labels,
            attention,
            origin,
        }
    }

    pub fn labeled_positions(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE)
            .map(|(i, &l)| (i, l))
    }

    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Outcome of masking one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Unselected,
    Mask,
    Random(u32),
    Keep,
}

/// Seed for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    key(&[seed, TAG_EPOCH, epoch as u64])
}

#[inline]
fn draw(seed: u64, origin: Origin, position: usize, policy: &MaskPolicy, vocab: &MaskVocab) -> Corruption {
    let k = key(&[seed, u64::from(origin.shard), u64::from(origin.chunk), position as u64]);
    if unit_f64(mix64(k ^ 1)) >= policy.select_prob {
        return Corruption::Unselected;
    }
    let u = unit_f64(mix64(k ^ 2));
    if u < policy.mask_frac {
        Corruption::Mask
    } else if u < policy.mask_frac + policy.random_frac {
        let pool = &vocab.replacements;
        Corruption::Random(pool[below(mix64(k ^ 3), pool.len() as u64) as usize])
    } else {
        Corruption::Keep
    }
}

/// Positions that may be selected: attended and not a special token.
pub fn eligible<'a>(chunk: &'a TokenChunk, vocab: &'a MaskVocab) -> impl Iterator<Item = usize> + 'a {
    chunk
        .ids
        .iter()
        .zip(&chunk.attention)
        .enumerate()
        .filter(move |(_, (&id, &att))| att && !vocab.is_special(id))
        .map(|(i, _)| i)
}

/// Per-position corruption decisions for a chunk (for statistics and tests).
pub fn corruption_plan(chunk: &TokenChunk, policy: &MaskPolicy, vocab: &MaskVocab, seed: u64) -> Vec<Corruption> {
    chunk
        .ids
        .iter()
        .zip(&chunk.attention)
        .enumerate()
        .map(|(i, (&id, &att))| {
            if att && !vocab.is_special(id) {
                draw(seed, chunk.origin, i, policy, vocab)
            } else {
                Corruption::Unselected
            }
        })
        .collect()
}

pub fn mask_chunk(chunk: &TokenChunk, policy: &MaskPolicy, vocab: &MaskVocab, seed: u64) -> MaskedExample {
    let mut input_ids = chunk.ids.clone();
    let mut labels = vec![IGNORE; chunk.ids.len()];
    for (i, c) in corruption_plan(chunk, policy, vocab, seed).into_iter().enumerate() {
        match c {
            Corruption::Unselected => continue,
            Corruption::Mask => input_ids[i] = vocab.mask_id,
            Corruption::Random(t) => input_ids[i] = t,
            Corruption::Keep => {}
        }
        labels[i] = chunk.ids[i];
    }
    MaskedExample {
        input_ids,
        labels,
        attention: chunk.attention.clone(),
        origin: chunk.origin,
    }
}

pub fn mask_stream<'a, I>(
    chunks: I,
    policy: &'a MaskPolicy,
    vocab: &'a MaskVocab,
    seed: u64,
) -> impl Iterator<Item = MaskedExample> + 'a
where
    I: IntoIterator<Item = &'a TokenChunk>,
    I::IntoIter: 'a,
{
    chunks.into_iter().map(move |c| mask_chunk(c, policy, vocab, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> MaskVocab {
        MaskVocab::new(50, 0, 2, vec![1, 3, 4]).unwrap()
    }

    fn chunk(ids: Vec<u32>) -> TokenChunk {
        TokenChunk::from_ids(ids, 0, Origin::new(0, 0))
    }

    #[test]
    fn all_padding_chunk_has_no_labels() {
        let ex = mask_chunk(&chunk(vec![0; 16]), &MaskPolicy::default(), &vocab(), 1);
        assert!(ex.labels.iter().all(|&l| l == IGNORE));
        assert_eq!(ex.input_ids, vec![0; 16]);
    }

    #[test]
    fn saturated_policy_masks_every_eligible_position() {
        let policy = MaskPolicy::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let ids = vec![4, 10, 11, 1, 12, 3, 0, 0];
        let ex = mask_chunk(&chunk(ids.clone()), &policy, &vocab(), 9);
        assert_eq!(ex.input_ids, vec![4, 2, 2, 1, 2, 3, 0, 0]);
        assert_eq!(ex.labels, vec![IGNORE, 10, 11, IGNORE, 12, IGNORE, IGNORE, IGNORE]);
    }

    #[test]
    fn policy_validation() {
        assert!(MaskPolicy::new(0.0, 0.8, 0.1, 0.1).is_err());
        assert!(MaskPolicy::new(0.15, 0.8, 0.1, 0.2).is_err());
        assert!(MaskPolicy::with_sub(0.15, "0.8,0.1,0.1").is_ok());
        assert!(MaskPolicy::with_sub(0.15, "0.8,0.2").is_err());
    }

    #[test]
    fn random_replacements_are_never_special() {
        let policy = MaskPolicy::new(1.0, 0.0, 1.0, 0.0).unwrap();
        let v = vocab();
        let c = chunk((0..256).map(|i| 5 + (i % 40) as u32).collect());
        for seed in 0..20 {
            let ex = mask_chunk(&c, &policy, &v, seed);
            assert!(ex.input_ids.iter().all(|&id| !v.is_special(id) && (id as usize) < 50));
        }
    }

    #[test]
    fn order_independent() {
        let v = vocab();
        let p = MaskPolicy::default();
        let chunks: Vec<TokenChunk> = (0..20)
            .map(|i| TokenChunk::from_ids((0..64).map(|j| 5 + ((i * 7 + j) % 40) as u32).collect(), 0, Origin::new(0, i)))
            .collect();
        let forward: Vec<_> = mask_stream(&chunks, &p, &v, 5).collect();
        let mut backward: Vec<_> = mask_stream(chunks.iter().rev(), &p, &v, 5).collect();
        backward.reverse();
        assert_eq!(forward, backward);
        assert_ne!(epoch_seed(5, 0), epoch_seed(5, 1));
    }
}
