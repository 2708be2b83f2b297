//! Deterministic train/validation/test assignment.
//!
//! A record's bucket depends only on `(seed, key)`:
//!
//! ```text
//! h = fnv1a64(seed as u64 little-endian bytes ++ key utf-8 bytes)
//! u = (splitmix64_finalize(h) >> 11) / 2^53          // in [0, 1)
//! TRAIN if u < train; VAL if u < train + validation; TEST otherwise
//! ```
//!
//! `key` is the record id for sentence-level splitting, or the id prefix
//! before the first `/` for document-level splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::ShardManifest;
use crate::error::{Error, Result};
use crate::keyed::{fnv1a64, mix64, unit_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("validation", self.validation), ("test", self.test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("split ratio {name} = {v} is outside [0, 1]")));
            }
        }
        let sum = self.train + self.validation + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn bucket(&self, u: f64) -> Split {
        if u < self.train {
            Split::Train
        } else if u < self.train + self.validation {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn get(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train,
            Split::Val => self.validation,
            Split::Test => self.test,
        }
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    /// Parses `"0.8,0.1,0.1"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("bad split ratios `{s}`: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => SplitRatios::new(*a, *b, *c),
            _ => Err(Error::config(format!("expected three split ratios, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    #[default]
    Sentence,
    /// Group records by the id prefix before the first `/`.
    Document,
}

impl FromStr for SplitUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(SplitUnit::Sentence),
            "document" => Ok(SplitUnit::Document),
            other => Err(Error::config(format!("unknown split unit `{other}`"))),
        }
    }
}

impl SplitUnit {
    pub fn key<'a>(&self, id: &'a str) -> &'a str {
        match self {
            SplitUnit::Sentence => id,
            SplitUnit::Document => id.split('/').next().unwrap_or(id),
        }
    }
}

/// The documented split hash: uniform position of `key` in `[0, 1)` under `seed`.
pub fn split_position(seed: u64, key: &str) -> f64 {
    let mut bytes = Vec::with_capacity(8 + key.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(key.as_bytes());
    unit_f64(mix64(fnv1a64(&bytes)))
}

/// Pure assignment rule shared by `split` and every downstream consumer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub seed: u64,
    pub ratios: SplitRatios,
    #[serde(default)]
    pub unit: SplitUnit,
}

impl SplitRule {
    pub fn new(ratios: SplitRatios, seed: u64, unit: SplitUnit) -> Result<Self> {
        ratios.validate()?;
        Ok(Self { seed, ratios, unit })
    }

    pub fn assign(&self, id: &str) -> Split {
        self.ratios.bucket(split_position(self.seed, self.unit.key(id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub rule: SplitRule,
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn counts(&self) -> [u64; 3] {
        let mut c = [0u64; 3];
        for s in self.assignment.values() {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn fraction(&self, split: Split) -> f64 {
        if self.assignment.is_empty() {
            return 0.0;
        }
        self.counts()[split as usize] as f64 / self.assignment.len() as f64
    }
}

/// Assign every record of the corpus to train/validation/test.
pub fn split(manifest: &ShardManifest, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    split_with_unit(manifest, ratios, seed, SplitUnit::Sentence)
}

pub fn split_with_unit(
    manifest: &ShardManifest,
    ratios: SplitRatios,
    seed: u64,
    unit: SplitUnit,
) -> Result<SplitAssignment> {
    let rule = SplitRule::new(ratios, seed, unit)?;
    if manifest.total_records == 0 {
        return Err(Error::config("cannot split an empty corpus"));
    }
    let mut assignment = BTreeMap::new();
    for i in 0..manifest.shard_count() {
        for rec in manifest.read_shard(i)? {
            let s = rule.assign(&rec.id);
            assignment.insert(rec.id, s);
        }
    }
    Ok(SplitAssignment { rule, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_validation() {
        assert!(SplitRatios::new(0.8, 0.1, 0.1).is_ok());
        assert!(SplitRatios::new(0.8, 0.1, 0.2).is_err());
        assert!(SplitRatios::new(1.2, -0.1, -0.1).is_err());
        assert!("0.8,0.1".parse::<SplitRatios>().is_err());
        assert_eq!("1,0,0".parse::<SplitRatios>().unwrap().train, 1.0);
    }

    #[test]
    fn degenerate_ratios_send_everything_to_train() {
        let rule = SplitRule::new(SplitRatios::new(1.0, 0.0, 0.0).unwrap(), 99, SplitUnit::Sentence).unwrap();
        for i in 0..5000 {
            assert_eq!(rule.assign(&format!("r{i}")), Split::Train);
        }
    }

    #[test]
    fn document_unit_groups_by_prefix() {
        let rule = SplitRule::new(SplitRatios::default(), 3, SplitUnit::Document).unwrap();
        for d in 0..200 {
            let first = rule.assign(&format!("protocol-{d}/0"));
            for s in 1..5 {
                assert_eq!(rule.assign(&format!("protocol-{d}/{s}")), first);
            }
        }
    }

    proptest! {
        #[test]
        fn assignment_ignores_other_records(ids in proptest::collection::hash_set("[a-z0-9]{1,12}", 1..60), seed in any::<u64>()) {
            let rule = SplitRule::new(SplitRatios::default(), seed, SplitUnit::Sentence).unwrap();
            let ids: Vec<String> = ids.into_iter().collect();
            let full: Vec<Split> = ids.iter().map(|id| rule.assign(id)).collect();
            // every other record removed; the survivors keep their bucket
            for (i, id) in ids.iter().enumerate().step_by(2) {
                prop_assert_eq!(rule.assign(id), full[i]);
            }
        }
    }
}
