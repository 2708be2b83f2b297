//! Masked-token perplexity, top-k accuracy and paired comparison tallies.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::digest_of;
use crate::error::{Error, IoContext, Result};
use crate::keyed::mix64;
use crate::mask::{mask_chunk, MaskPolicy, MaskVocab, MaskedExample};
use crate::model::{nll, Backend, PositionLogits};
use crate::pack::TokenChunk;
use crate::Origin;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Strictly ascending.
    pub ks: Vec<usize>,
    /// Mask seed; fixed so every model sees the same masked inputs.
    pub seed: u64,
    /// Score only positions whose input was replaced by `[MASK]`.
    pub restrict_to_mask_token: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 2, 5], seed: 1234, restrict_to_mask_token: false, batch_size: 32 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(Error::config("eval.ks must not be empty"));
        }
        if self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("eval.ks {:?} must be positive and strictly ascending", self.ks)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be positive"));
        }
        Ok(())
    }

    /// Identifies the evaluation protocol and data; reports are comparable only when equal.
    pub fn digest(&self, policy: &MaskPolicy, chunks: &[TokenChunk]) -> String {
        #[derive(Serialize)]
        struct D<'a> {
            ks: &'a [usize],
            seed: u64,
            restrict_to_mask_token: bool,
            policy: &'a MaskPolicy,
            chunks: usize,
            data: String,
        }
        digest_of(&D {
            ks: &self.ks,
            seed: self.seed,
            restrict_to_mask_token: self.restrict_to_mask_token,
            policy,
            chunks: chunks.len(),
            data: format!("{:016x}", data_fingerprint(chunks)),
        })
    }
}

fn data_fingerprint(chunks: &[TokenChunk]) -> u64 {
    let mut h = 0u64;
    for c in chunks {
        h = mix64(h ^ (u64::from(c.origin.shard) << 32 | u64::from(c.origin.chunk)));
        for &id in &c.ids {
            h = mix64(h ^ u64::from(id));
        }
    }
    h
}

/// 1-based rank of `label` under (score descending, token id ascending).
pub fn rank_of_label(row: &[f32], label: u32) -> usize {
    let l = label as usize;
    let s = row[l];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < l))
        .count()
}

/// Running sums from which an [`EvalReport`] is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub digest: String,
    pub ks: Vec<usize>,
    pub labeled_positions: u64,
    pub total_nll: f64,
    /// `hits[j]` counts positions with rank ≤ `ks[j]`.
    pub hits: Vec<u64>,
}

impl MetricAccumulator {
    pub fn new(digest: impl Into<String>, ks: &[usize]) -> Self {
        Self { digest: digest.into(), ks: ks.to_vec(), labeled_positions: 0, total_nll: 0.0, hits: vec![0; ks.len()] }
    }

    pub fn add(&mut self, nll: f64, rank: usize) {
        self.labeled_positions += 1;
        self.total_nll += nll;
        for (h, &k) in self.hits.iter_mut().zip(&self.ks) {
            if rank <= k {
                *h += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) -> Result<()> {
        if self.digest != other.digest {
            return Err(Error::config(format!(
                "cannot merge accumulators with different config digests ({} vs {})",
                self.digest, other.digest
            )));
        }
        if self.ks != other.ks {
            return Err(Error::config("cannot merge accumulators with different k lists"));
        }
        self.labeled_positions += other.labeled_positions;
        self.total_nll += other.total_nll;
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.labeled_positions == 0 {
            return Err(Error::NoSupervisedPositions);
        }
        let n = self.labeled_positions as f64;
        let mean_nll = self.total_nll / n;
        Ok(EvalReport {
            perplexity: mean_nll.exp(),
            mean_nll,
            labeled_positions: self.labeled_positions,
            total_nll: self.total_nll,
            top_k: self
                .ks
                .iter()
                .zip(&self.hits)
                .map(|(&k, &hits)| TopK { k, hits, accuracy: hits as f64 / n })
                .collect(),
            config_digest: self.digest.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub hits: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub labeled_positions: u64,
    pub total_nll: f64,
    pub top_k: Vec<TopK>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.top_k.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }

    pub fn hits(&self, k: usize) -> Option<u64> {
        self.top_k.iter().find(|t| t.k == k).map(|t| t.hits)
    }

    pub fn is_monotone(&self) -> bool {
        self.top_k.windows(2).all(|w| w[0].hits <= w[1].hits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).ctx(|| path.display().to_string())?;
        fs::write(path, text + "\n").ctx(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).ctx(|| path.display().to_string())
    }
}

/// One scored position: the unit of the per-position log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionRecord {
    pub origin: Origin,
    pub position: u32,
    pub label: u32,
    pub nll: f64,
    pub rank: u32,
}

/// The examples an evaluation scores, masked with the evaluation seed.
pub fn eval_examples(chunks: &[TokenChunk], policy: &MaskPolicy, vocab: &MaskVocab, cfg: &EvalConfig) -> Vec<MaskedExample> {
    chunks.iter().map(|c| mask_chunk(c, policy, vocab, cfg.seed)).collect()
}

fn scored_positions<'a>(
    ex: &'a MaskedExample,
    vocab: &'a MaskVocab,
    cfg: &'a EvalConfig,
) -> impl Iterator<Item = (usize, u32)> + 'a {
    ex.labeled_positions()
        .filter(move |&(i, _)| !cfg.restrict_to_mask_token || ex.input_ids[i] == vocab.mask_id)
}

fn score_batch(
    logits: &PositionLogits,
    batch: &[MaskedExample],
    vocab: &MaskVocab,
    cfg: &EvalConfig,
    out: &mut Vec<PositionRecord>,
) -> Result<()> {
    if !logits.all_finite() {
        return Err(Error::NonFiniteLoss {
            loss: f64::NAN,
            step: 0,
            epoch: 0,
            origin: batch.first().map(|e| e.origin),
        });
    }
    for (b, ex) in batch.iter().enumerate() {
        for (i, label) in scored_positions(ex, vocab, cfg) {
            let row = logits.row(b, i);
            out.push(PositionRecord {
                origin: ex.origin,
                position: i as u32,
                label,
                nll: nll(row, label),
                rank: rank_of_label(row, label) as u32,
            });
        }
    }
    Ok(())
}

fn check_inputs(backend: &dyn Backend, vocab: &MaskVocab, cfg: &EvalConfig) -> Result<()> {
    cfg.validate()?;
    if backend.vocab_size() != vocab.vocab_size {
        return Err(Error::config(format!(
            "backend vocabulary {} differs from tokenizer vocabulary {}",
            backend.vocab_size(),
            vocab.vocab_size
        )));
    }
    Ok(())
}

pub fn accumulate(records: &[PositionRecord], digest: &str, ks: &[usize]) -> MetricAccumulator {
    let mut acc = MetricAccumulator::new(digest, ks);
    for r in records {
        acc.add(r.nll, r.rank as usize);
    }
    acc
}

/// Score every labeled position and keep the per-position log.
pub fn evaluate_positions(
    backend: &dyn Backend,
    chunks: &[TokenChunk],
    policy: &MaskPolicy,
    vocab: &MaskVocab,
    cfg: &EvalConfig,
) -> Result<(MetricAccumulator, Vec<PositionRecord>)> {
    check_inputs(backend, vocab, cfg)?;
    let examples = eval_examples(chunks, policy, vocab, cfg);
    let mut records = Vec::new();
    for batch in examples.chunks(cfg.batch_size) {
        let logits = backend.forward(batch)?;
        score_batch(&logits, batch, vocab, cfg, &mut records)?;
    }
    let acc = accumulate(&records, &cfg.digest(policy, chunks), &cfg.ks);
    Ok((acc, records))
}

pub fn evaluate(
    backend: &dyn Backend,
    chunks: &[TokenChunk],
    policy: &MaskPolicy,
    vocab: &MaskVocab,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_positions(backend, chunks, policy, vocab, cfg)?.0.report()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TallyCells {
    pub k: usize,
    pub both_hit: u64,
    pub a_only: u64,
    pub b_only: u64,
    pub both_miss: u64,
}

impl TallyCells {
    pub fn total(&self) -> u64 {
        self.both_hit + self.a_only + self.b_only + self.both_miss
    }
}

/// Per-position 2x2 hit/miss contingency of two models at each k.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonTally {
    pub labeled_positions: u64,
    pub cells: Vec<TallyCells>,
}

impl ComparisonTally {
    pub fn at(&self, k: usize) -> Option<&TallyCells> {
        self.cells.iter().find(|c| c.k == k)
    }

    /// `hits_A(k) - hits_B(k) == a_only - b_only` and every row sums to the
    /// labeled-position count. Checked on integer counts, so it is exact.
    pub fn identity_holds(&self, a: &EvalReport, b: &EvalReport) -> bool {
        self.cells.iter().all(|c| {
            let (Some(ha), Some(hb)) = (a.hits(c.k), b.hits(c.k)) else { return false };
            c.total() == self.labeled_positions
                && a.labeled_positions == self.labeled_positions
                && b.labeled_positions == self.labeled_positions
                && ha as i128 - hb as i128 == c.a_only as i128 - c.b_only as i128
        })
    }
}

/// Tally two per-position logs that cover the same positions in the same order.
pub fn tally(a: &[PositionRecord], b: &[PositionRecord], ks: &[usize]) -> Result<ComparisonTally> {
    if a.len() != b.len() {
        return Err(Error::integrity(format!("position logs differ in length ({} vs {})", a.len(), b.len())));
    }
    let mut cells: Vec<TallyCells> = ks.iter().map(|&k| TallyCells { k, ..Default::default() }).collect();
    for (x, y) in a.iter().zip(b) {
        if (x.origin, x.position, x.label) != (y.origin, y.position, y.label) {
            return Err(Error::integrity(format!(
                "position logs diverge at chunk {:?} position {}",
                x.origin, x.position
            )));
        }
        for c in &mut cells {
            let k = c.k as u32;
            match (x.rank <= k, y.rank <= k) {
                (true, true) => c.both_hit += 1,
                (true, false) => c.a_only += 1,
                (false, true) => c.b_only += 1,
                (false, false) => c.both_miss += 1,
            }
        }
    }
    Ok(ComparisonTally { labeled_positions: a.len() as u64, cells })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub a: EvalReport,
    pub b: EvalReport,
    pub tally: ComparisonTally,
    pub a_positions: Vec<PositionRecord>,
    pub b_positions: Vec<PositionRecord>,
}

/// Score two backends on byte-identical masked inputs.
pub fn compare(
    a: &dyn Backend,
    b: &dyn Backend,
    chunks: &[TokenChunk],
    policy: &MaskPolicy,
    vocab: &MaskVocab,
    cfg: &EvalConfig,
) -> Result<Comparison> {
    if a.vocab_size() != b.vocab_size() {
        return Err(Error::config(format!(
            "backends disagree on vocabulary size ({} vs {})",
            a.vocab_size(),
            b.vocab_size()
        )));
    }
    check_inputs(a, vocab, cfg)?;
    let examples = eval_examples(chunks, policy, vocab, cfg);
    let (mut ra, mut rb) = (Vec::new(), Vec::new());
    for batch in examples.chunks(cfg.batch_size) {
        score_batch(&a.forward(batch)?, batch, vocab, cfg, &mut ra)?;
        score_batch(&b.forward(batch)?, batch, vocab, cfg, &mut rb)?;
    }
    let digest = cfg.digest(policy, chunks);
    let tally = tally(&ra, &rb, &cfg.ks)?;
    Ok(Comparison {
        a: accumulate(&ra, &digest, &cfg.ks).report()?,
        b: accumulate(&rb, &digest, &cfg.ks).report()?,
        tally,
        a_positions: ra,
        b_positions: rb,
    })
}

const LOG_COLUMNS: &str = "shard\tchunk\tposition\tlabel\tnll\trank";

/// Tab-separated per-position log with a digest header. NLLs are written in
/// shortest round-trip form, so replay reproduces the sums bit for bit.
pub fn write_position_log(path: &Path, digest: &str, ks: &[usize], records: &[PositionRecord]) -> Result<()> {
    let mut s = String::with_capacity(64 + records.len() * 40);
    let ks_text: Vec<String> = ks.iter().map(|k| k.to_string()).collect();
    let _ = writeln!(s, "# config_digest {digest}");
    let _ = writeln!(s, "# ks {}", ks_text.join(","));
    let _ = writeln!(s, "{LOG_COLUMNS}");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:?}\t{}",
            r.origin.shard, r.origin.chunk, r.position, r.label, r.nll, r.rank
        );
    }
    fs::write(path, s).ctx(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionLog {
    pub digest: String,
    pub ks: Vec<usize>,
    pub records: Vec<PositionRecord>,
}

impl PositionLog {
    pub fn accumulator(&self) -> MetricAccumulator {
        accumulate(&self.records, &self.digest, &self.ks)
    }
}

pub fn read_position_log(path: &Path) -> Result<PositionLog> {
    let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
    let mut digest = None;
    let mut ks = None;
    let mut records = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        let bad = |msg: String| Error::format(path, here, msg);
        if let Some(rest) = line.strip_prefix("# config_digest ") {
            digest = Some(rest.trim().to_string());
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ks ") {
            let parsed: std::result::Result<Vec<usize>, _> = rest.split(',').map(|k| k.trim().parse()).collect();
            ks = Some(parsed.map_err(|e| bad(format!("bad k list: {e}")))?);
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() || line == LOG_COLUMNS {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<u32>().map_err(|e| bad(format!("bad integer `{s}`: {e}")));
        let nll: f64 = f[4].parse().map_err(|e| bad(format!("bad nll `{}`: {e}", f[4])))?;
        let rank = int(f[5])?;
        if !(nll.is_finite() && nll >= 0.0) || rank == 0 {
            return Err(bad("nll must be finite and non-negative, rank at least 1".into()));
        }
        records.push(PositionRecord {
            origin: Origin::new(int(f[0])?, int(f[1])?),
            position: int(f[2])?,
            label: int(f[3])?,
            nll,
            rank,
        });
    }
    let digest = digest.ok_or_else(|| Error::format(path, 0, "missing `# config_digest` header"))?;
    let ks = ks.ok_or_else(|| Error::format(path, 0, "missing `# ks` header"))?;
    let cfg = EvalConfig { ks: ks.clone(), ..Default::default() };
    cfg.validate()?;
    Ok(PositionLog { digest, ks, records })
}

/// Rebuild the accumulator of a recorded evaluation from its position log.
pub fn replay(path: &Path) -> Result<MetricAccumulator> {
    Ok(read_position_log(path)?.accumulator())
}
