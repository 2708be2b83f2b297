//! Declarative run configuration and content digests.
//!
//! A run config is a TOML document. Sections and dotted keys are
//! interchangeable, so `train.learning_rate = 1e-4` at top level and
//! `learning_rate = 1e-4` under `[train]` mean the same thing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::eval::EvalConfig;
use crate::mask::MaskPolicy;
use crate::model::TinyConfig;
use crate::split::{SplitRatios, SplitUnit};
use crate::train::TrainConfig;

/// Environment variable that overrides `paths.workdir`.
pub const WORKDIR_ENV: &str = "MLM_ADAPT_WORKDIR";

/// Hex sha256 of the canonical JSON form of `value` (object keys sorted).
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config values serialize to JSON");
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// JSONL sentence corpus.
    pub corpus: PathBuf,
    pub workdir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { corpus: PathBuf::from("corpus.jsonl"), workdir: PathBuf::from("work") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub shard_size: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { shard_size: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
    pub unit: SplitUnit,
}

impl Default for SplitSection {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self { train: r.train, validation: r.validation, test: r.test, seed: 42, unit: SplitUnit::Sentence }
    }
}

impl SplitSection {
    pub fn ratios(&self) -> Result<SplitRatios> {
        SplitRatios::new(self.train, self.validation, self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    /// `word:<vocab file>` or a bare vocab path.
    pub spec: String,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { spec: "word:vocab.txt".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackSection {
    pub chunk_len: usize,
    /// Insert `[SEP]` between sentences.
    pub delimiter: bool,
    /// Frame every chunk with `[CLS] ... [SEP]`.
    pub framing: bool,
    /// Seeded fraction of test sentences packed for evaluation.
    pub eval_sentence_fraction: f64,
}

impl Default for PackSection {
    fn default() -> Self {
        Self { chunk_len: crate::pack::DEFAULT_CHUNK_LEN, delimiter: false, framing: false, eval_sentence_fraction: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TinyConfig::new(1, 1);
        Self { layers: t.layers, hidden: t.hidden, heads: t.heads, ff: t.ff, init_seed: t.init_seed }
    }
}

impl ModelSection {
    pub fn tiny_config(&self, vocab_size: usize, max_len: usize) -> TinyConfig {
        TinyConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ff: self.ff,
            init_seed: self.init_seed,
            ..TinyConfig::new(vocab_size, max_len)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub label_a: String,
    pub label_b: String,
    pub caption: Option<String>,
    /// Backend scored as column A; `best` is the selected fine-tuned checkpoint.
    pub backend_a: String,
    /// Backend scored as column B; `init` is the model before fine-tuning.
    pub backend_b: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            label_a: "fine-tuned".into(),
            label_b: "initial".into(),
            caption: None,
            backend_a: "best".into(),
            backend_b: "init".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    pub tokenizer: TokenizerSection,
    pub pack: PackSection,
    pub mask: MaskPolicy,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub report: ReportSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `path`, resolve relative paths against its directory and apply
    /// the workdir environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).ctx(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        if let Some(dir) = std::env::var_os(WORKDIR_ENV) {
            cfg.paths.workdir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        self.paths.corpus = abs(&self.paths.corpus);
        self.paths.workdir = abs(&self.paths.workdir);
        if let Some(rest) = self.tokenizer.spec.strip_prefix("word:") {
            self.tokenizer.spec = format!("word:{}", abs(Path::new(rest)).display());
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.shard_size == 0 {
            return Err(Error::config("corpus.shard_size must be positive"));
        }
        self.split.ratios()?;
        if self.pack.chunk_len < 3 {
            return Err(Error::config("pack.chunk_len must be at least 3"));
        }
        if !(self.pack.eval_sentence_fraction > 0.0 && self.pack.eval_sentence_fraction <= 1.0) {
            return Err(Error::config("pack.eval_sentence_fraction must be in (0, 1]"));
        }
        self.mask.validate()?;
        self.model.tiny_config(1, 1).validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        // TOML integers are signed
        let seeds = [self.split.seed, self.model.init_seed, self.train.seed, self.eval.seed];
        if seeds.iter().any(|&s| s > i64::MAX as u64) {
            return Err(Error::config(format!("seeds must not exceed {}", i64::MAX)));
        }
        Ok(())
    }

    /// Digest of everything except the workdir location.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths.workdir = PathBuf::new();
        digest_of(&c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}
