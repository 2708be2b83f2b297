//! Config-driven stage runner over a work directory.
//!
//! ```text
//! <workdir>/shards/            ingest
//! <workdir>/split.json         split
//! <workdir>/chunks/*.chunks    pack (train, val, test)
//! <workdir>/masked/*.masked    mask (evaluation view of val and test)
//! <workdir>/train/             train (checkpoints, log, best.json)
//! <workdir>/eval/              eval (report and per-position log of column A)
//! <workdir>/compare/           compare (both reports, tally, position logs)
//! <workdir>/report.md          report
//! <workdir>/stamps/<stage>     input digest of the last successful run
//! ```
//!
//! A stage is skipped when its stamp matches the digest of its inputs and
//! its outputs exist.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::chunkfile::{read_chunks, write_chunks, write_masked};
use crate::config::{digest_of, RunConfig};
use crate::corpus::{ingest_jsonl, ShardManifest, MANIFEST_FILE};
use crate::error::{Error, IoContext, Result};
use crate::eval::{compare, evaluate_positions, eval_examples, write_position_log, EvalReport};
use crate::keyed::key;
use crate::mask::MaskVocab;
use crate::model::tiny::{CONFIG_FILE, WEIGHTS_FILE};
use crate::model::{Backend, StubBackend, TinyEncoder};
use crate::pack::{pack, PackConfig, TokenChunk};
use crate::report::render_report;
use crate::split::{split_position, split_with_unit, Split, SplitAssignment};
use crate::tokenizer::{resolve, TokenizerAdapter};
use crate::train::{train, CheckpointRecord, TrainControl, TrainData, BEST_FILE};

const TAG_SUBSAMPLE: u64 = 0x5355_4253; // "SUBS"
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Split,
    Pack,
    Mask,
    Train,
    Eval,
    Compare,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Split,
        Stage::Pack,
        Stage::Mask,
        Stage::Train,
        Stage::Eval,
        Stage::Compare,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Pack => "pack",
            Stage::Mask => "mask",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Compare => "compare",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Split => &[Stage::Ingest],
            Stage::Pack => &[Stage::Split],
            Stage::Mask => &[Stage::Pack],
            Stage::Train => &[Stage::Pack],
            Stage::Eval | Stage::Compare => &[Stage::Pack, Stage::Train],
            Stage::Report => &[Stage::Compare],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

/// Parse `all` or a comma-separated stage list.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub quiet: bool,
    /// Run even when the stamp says the stage is up to date.
    pub force: bool,
}

/// Paths of every artifact under a work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn shards(&self) -> PathBuf {
        self.root.join("shards")
    }

    pub fn manifest(&self) -> PathBuf {
        self.shards().join(MANIFEST_FILE)
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn chunks(&self, split: Split) -> PathBuf {
        self.root.join("chunks").join(format!("{}.chunks", split.as_str()))
    }

    pub fn masked(&self, split: Split) -> PathBuf {
        self.root.join("masked").join(format!("{}.masked", split.as_str()))
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn compare(&self) -> PathBuf {
        self.root.join("compare")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }

    fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join("stamps").join(stage.name())
    }

    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Ingest => vec![self.manifest()],
            Stage::Split => vec![self.split()],
            Stage::Pack => Split::ALL.iter().map(|&s| self.chunks(s)).collect(),
            Stage::Mask => vec![self.masked(Split::Val), self.masked(Split::Test)],
            Stage::Train => vec![self.train().join(BEST_FILE)],
            Stage::Eval => vec![self.eval().join("report.json"), self.eval().join("positions.tsv")],
            Stage::Compare => vec![self.compare().join("tally.json")],
            Stage::Report => vec![self.report()],
        }
    }

    /// Checkpoint directory selected by the train stage.
    pub fn best_checkpoint(&self) -> Result<PathBuf> {
        let path = self.train().join(BEST_FILE);
        if !path.exists() {
            return Err(Error::MissingPrerequisite { stage: "train", path });
        }
        let text = fs::read_to_string(&path).ctx(|| format!("reading {}", path.display()))?;
        let rec: CheckpointRecord = serde_json::from_str(&text).ctx(|| path.display().to_string())?;
        Ok(rec.path)
    }

    /// Weights before any update.
    pub fn init_checkpoint(&self) -> PathBuf {
        self.train().join("checkpoint-000000")
    }
}

/// Resolve a backend spec: `uniform`, `tiny:<checkpoint dir>`, a bare
/// checkpoint directory, or (with a workdir) `best` / `init`.
pub fn resolve_backend(spec: &str, workdir: Option<&Workdir>, vocab_size: usize) -> Result<Box<dyn Backend>> {
    let dir = match spec {
        "uniform" => return Ok(Box::new(StubBackend::uniform(vocab_size))),
        "best" | "init" => {
            let wd = workdir.ok_or_else(|| Error::config(format!("backend `{spec}` needs a work directory")))?;
            if spec == "best" {
                wd.best_checkpoint()?
            } else {
                wd.init_checkpoint()
            }
        }
        s if s.starts_with("external:") => {
            return Err(Error::config(format!(
                "backend `{s}`: external checkpoints are not supported; export the weights as a tiny:<dir> checkpoint"
            )))
        }
        s => PathBuf::from(s.strip_prefix("tiny:").unwrap_or(s)),
    };
    if !dir.join(CONFIG_FILE).exists() || !dir.join(WEIGHTS_FILE).exists() {
        return Err(Error::MissingPrerequisite { stage: "train", path: dir });
    }
    Ok(Box::new(TinyEncoder::load(&dir, Some(vocab_size))?))
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).ctx(|| format!("creating {}", root.display()))?;
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::config(format!(
                "work directory {} is in use by another run (remove {} if it is stale)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(e).ctx(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).ctx(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value).ctx(|| path.display().to_string())?;
    fs::write(path, text + "\n").ctx(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).ctx(|| path.display().to_string())
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    wd: Workdir,
    opts: &'a PipelineOptions,
}

impl Runner<'_> {
    fn say(&self, msg: impl fmt::Display) {
        if !self.opts.quiet {
            eprintln!("{msg}");
        }
    }

    fn upstream_stamp(&self, stage: Stage) -> Result<String> {
        let path = self.wd.stamp(stage);
        if !path.exists() {
            return Err(Error::MissingPrerequisite { stage: stage.name(), path });
        }
        fs::read_to_string(&path).ctx(|| format!("reading {}", path.display()))
    }

    fn tokenizer(&self) -> Result<Box<dyn TokenizerAdapter>> {
        resolve(&self.cfg.tokenizer.spec)
    }

    /// Digest of everything `stage` reads.
    fn input_digest(&self, stage: Stage) -> Result<String> {
        let c = self.cfg;
        let mut parts: Vec<(String, String)> = Vec::new();
        for &p in stage.prerequisites() {
            parts.push((p.name().into(), self.upstream_stamp(p)?));
        }
        let mut put = |k: &str, v: String| parts.push((k.into(), v));
        match stage {
            Stage::Ingest => {
                if !c.paths.corpus.exists() {
                    return Err(Error::config(format!("corpus file {} not found", c.paths.corpus.display())));
                }
                put("corpus", file_sha256(&c.paths.corpus)?);
                put("section", digest_of(&c.corpus));
            }
            Stage::Split => put("section", digest_of(&c.split)),
            Stage::Pack => {
                put("tokenizer", self.tokenizer()?.digest());
                put("section", digest_of(&c.pack));
                put("eval_seed", c.eval.seed.to_string());
            }
            Stage::Mask => {
                put("mask", digest_of(&c.mask));
                put("eval", digest_of(&c.eval));
                put("train_seed", c.train.seed.to_string());
            }
            Stage::Train => {
                put("mask", digest_of(&c.mask));
                put("model", digest_of(&c.model));
                put("train", digest_of(&c.train));
            }
            Stage::Eval | Stage::Compare => {
                put("mask", digest_of(&c.mask));
                put("eval", digest_of(&c.eval));
                put("backend_a", c.report.backend_a.clone());
                if stage == Stage::Compare {
                    put("backend_b", c.report.backend_b.clone());
                }
            }
            Stage::Report => put("report", digest_of(&c.report)),
        }
        Ok(digest_of(&parts))
    }

    fn up_to_date(&self, stage: Stage, digest: &str) -> bool {
        !self.opts.force
            && fs::read_to_string(self.wd.stamp(stage)).is_ok_and(|s| s == digest)
            && self.wd.outputs(stage).iter().all(|p| p.exists())
    }

    fn run(&self, stage: Stage) -> Result<StageStatus> {
        let digest = self.input_digest(stage)?;
        if self.up_to_date(stage, &digest) {
            self.say(format_args!("[{stage}] up to date"));
            return Ok(StageStatus::UpToDate);
        }
        self.say(format_args!("[{stage}] running"));
        match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Split => self.split()?,
            Stage::Pack => self.pack()?,
            Stage::Mask => self.mask()?,
            Stage::Train => self.train()?,
            Stage::Eval => self.eval()?,
            Stage::Compare => self.compare()?,
            Stage::Report => self.report()?,
        }
        let stamp = self.wd.stamp(stage);
        fs::create_dir_all(stamp.parent().unwrap()).ctx(|| "creating stamps directory".to_string())?;
        fs::write(&stamp, &digest).ctx(|| format!("writing {}", stamp.display()))?;
        Ok(StageStatus::Ran)
    }

    fn ingest(&self) -> Result<()> {
        let dir = self.wd.shards();
        if dir.exists() {
            fs::remove_dir_all(&dir).ctx(|| format!("clearing {}", dir.display()))?;
        }
        let m = ingest_jsonl(&self.cfg.paths.corpus, dir, self.cfg.corpus.shard_size)?;
        self.say(format_args!(
            "  {} records in {} shards ({} empty, {} malformed skipped)",
            m.total_records,
            m.shard_count(),
            m.skipped_empty,
            m.skipped_malformed
        ));
        Ok(())
    }

    fn split(&self) -> Result<()> {
        let m = ShardManifest::load(&self.wd.manifest())?;
        let s = &self.cfg.split;
        let a = split_with_unit(&m, s.ratios()?, s.seed, s.unit)?;
        let [tr, va, te] = a.counts();
        self.say(format_args!("  train {tr}, validation {va}, test {te}"));
        write_json(&self.wd.split(), &a)
    }

    fn pack_config(&self, tok: &dyn TokenizerAdapter) -> Result<PackConfig> {
        let mut pc = PackConfig::for_tokenizer(tok, self.cfg.pack.chunk_len);
        if self.cfg.pack.delimiter {
            pc = pc.with_delimiter(tok)?;
        }
        if self.cfg.pack.framing {
            pc = pc.with_framing(tok)?;
        }
        Ok(pc)
    }

    fn pack(&self) -> Result<()> {
        let m = ShardManifest::load(&self.wd.manifest())?;
        let a: SplitAssignment = read_json(&self.wd.split())?;
        let tok = self.tokenizer()?;
        let pc = self.pack_config(&*tok)?;
        let fraction = self.cfg.pack.eval_sentence_fraction;
        let sub_seed = key(&[self.cfg.eval.seed, TAG_SUBSAMPLE]);
        let mut per_split: [Vec<TokenChunk>; 3] = Default::default();
        for shard in 0..m.shard_count() {
            let records = m.read_shard(shard)?;
            for split in Split::ALL {
                let mut seqs = Vec::new();
                for r in &records {
                    let assigned = a.assignment.get(&r.id).copied().ok_or_else(|| {
                        Error::integrity(format!("record `{}` has no split assignment; rerun split", r.id))
                    })?;
                    if assigned != split {
                        continue;
                    }
                    if split == Split::Test && fraction < 1.0 && split_position(sub_seed, &r.id) >= fraction {
                        continue;
                    }
                    seqs.push(tok.encode(&r.text)?);
                }
                per_split[split as usize].extend(pack(seqs, pc, shard as u32)?);
            }
        }
        fs::create_dir_all(self.wd.root.join("chunks")).ctx(|| "creating chunks directory".to_string())?;
        for split in Split::ALL {
            let chunks = &per_split[split as usize];
            write_chunks(&self.wd.chunks(split), chunks, pc.pad_id, pc.chunk_len)?;
            self.say(format_args!("  {split}: {} chunks", chunks.len()));
        }
        Ok(())
    }

    fn vocab(&self) -> Result<(Box<dyn TokenizerAdapter>, MaskVocab)> {
        let tok = self.tokenizer()?;
        let vocab = MaskVocab::from_tokenizer(&*tok)?;
        Ok((tok, vocab))
    }

    fn mask(&self) -> Result<()> {
        let (_, vocab) = self.vocab()?;
        fs::create_dir_all(self.wd.root.join("masked")).ctx(|| "creating masked directory".to_string())?;
        let val = read_chunks(&self.wd.chunks(Split::Val))?;
        let val_cfg = crate::train::TrainData { train: &[], val: &val, policy: &self.cfg.mask, vocab: &vocab };
        let masked_val = crate::train::validation_set(&self.cfg.train, &val_cfg);
        write_masked(&self.wd.masked(Split::Val), &masked_val, vocab.pad_id, self.cfg.pack.chunk_len)?;
        let test = read_chunks(&self.wd.chunks(Split::Test))?;
        let masked_test = eval_examples(&test, &self.cfg.mask, &vocab, &self.cfg.eval);
        write_masked(&self.wd.masked(Split::Test), &masked_test, vocab.pad_id, self.cfg.pack.chunk_len)?;
        let labeled: usize = masked_test.iter().map(|e| e.num_labeled()).sum();
        self.say(format_args!("  test: {} chunks, {labeled} labeled positions", masked_test.len()));
        Ok(())
    }

    fn train(&self) -> Result<()> {
        let (tok, vocab) = self.vocab()?;
        let train_chunks = read_chunks(&self.wd.chunks(Split::Train))?;
        let val_chunks = read_chunks(&self.wd.chunks(Split::Val))?;
        let mut tc = self.cfg.model.tiny_config(tok.vocab_size(), self.cfg.pack.chunk_len);
        tc.tokenizer_digest = tok.digest();
        let mut model = TinyEncoder::new(tc)?;
        let out = self.wd.train();
        if out.exists() {
            fs::remove_dir_all(&out).ctx(|| format!("clearing {}", out.display()))?;
        }
        let data = TrainData { train: &train_chunks, val: &val_chunks, policy: &self.cfg.mask, vocab: &vocab };
        let control = TrainControl { stop_after_steps: None, quiet: self.opts.quiet };
        let outcome = train(&mut model, data, &self.cfg.train, &out, &control)?;
        if let Some(best) = &outcome.best {
            self.say(format_args!(
                "  initial val loss {:.4}; best val loss {:.4} at step {}",
                outcome.initial_val_loss, best.val_loss, best.step
            ));
        }
        Ok(())
    }

    fn test_inputs(&self) -> Result<(MaskVocab, Vec<TokenChunk>)> {
        let (_, vocab) = self.vocab()?;
        Ok((vocab, read_chunks(&self.wd.chunks(Split::Test))?))
    }

    fn eval(&self) -> Result<()> {
        let (vocab, test) = self.test_inputs()?;
        let backend = resolve_backend(&self.cfg.report.backend_a, Some(&self.wd), vocab.vocab_size)?;
        let (acc, positions) = evaluate_positions(&*backend, &test, &self.cfg.mask, &vocab, &self.cfg.eval)?;
        let report = acc.report()?;
        let dir = self.wd.eval();
        fs::create_dir_all(&dir).ctx(|| format!("creating {}", dir.display()))?;
        report.save(&dir.join("report.json"))?;
        write_position_log(&dir.join("positions.tsv"), &acc.digest, &acc.ks, &positions)?;
        self.say(format_args!(
            "  {}: perplexity {:.2} over {} positions",
            self.cfg.report.backend_a, report.perplexity, report.labeled_positions
        ));
        Ok(())
    }

    fn compare(&self) -> Result<()> {
        let (vocab, test) = self.test_inputs()?;
        let r = &self.cfg.report;
        let a = resolve_backend(&r.backend_a, Some(&self.wd), vocab.vocab_size)?;
        let b = resolve_backend(&r.backend_b, Some(&self.wd), vocab.vocab_size)?;
        let c = compare(&*a, &*b, &test, &self.cfg.mask, &vocab, &self.cfg.eval)?;
        let dir = self.wd.compare();
        fs::create_dir_all(&dir).ctx(|| format!("creating {}", dir.display()))?;
        c.a.save(&dir.join("a.json"))?;
        c.b.save(&dir.join("b.json"))?;
        write_position_log(&dir.join("a.positions.tsv"), &c.a.config_digest, &self.cfg.eval.ks, &c.a_positions)?;
        write_position_log(&dir.join("b.positions.tsv"), &c.b.config_digest, &self.cfg.eval.ks, &c.b_positions)?;
        write_json(&dir.join("tally.json"), &c.tally)?;
        for cell in &c.tally.cells {
            self.say(format_args!(
                "  top-{}: both {} / a only {} / b only {} / neither {}",
                cell.k, cell.both_hit, cell.a_only, cell.b_only, cell.both_miss
            ));
        }
        Ok(())
    }

    fn report(&self) -> Result<()> {
        let dir = self.wd.compare();
        let a = EvalReport::load(&dir.join("a.json"))?;
        let b = EvalReport::load(&dir.join("b.json"))?;
        let r = &self.cfg.report;
        let table = render_report(&a, &b, (&r.label_a, &r.label_b), r.caption.as_deref())?;
        let text = table.to_string();
        fs::write(self.wd.report(), &text).ctx(|| format!("writing {}", self.wd.report().display()))?;
        self.say(&text);
        Ok(())
    }
}

/// Run `stages` (in dependency order) against the configured work directory.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage], opts: &PipelineOptions) -> Result<Vec<(Stage, StageStatus)>> {
    cfg.validate()?;
    let wd = Workdir::new(&cfg.paths.workdir);
    let _lock = Lock::acquire(&wd.root)?;
    let mut todo = stages.to_vec();
    todo.sort_unstable();
    todo.dedup();
    let runner = Runner { cfg, wd, opts };
    todo.into_iter().map(|s| Ok((s, runner.run(s)?))).collect()
}
