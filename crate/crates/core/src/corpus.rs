//! Sentence records, sharded storage and the shard manifest.
//!
//! Shards are newline-delimited JSON objects `{"id","text","source_tag"}`,
//! one record per line, named `shard-{index:05}.jsonl` next to
//! `manifest.json`.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source_tag: String,
}

impl SentenceRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source_tag: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source_tag: source_tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub records: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub format_version: u32,
    pub shard_size: u64,
    pub shards: Vec<ShardEntry>,
    pub total_records: u64,
    pub skipped_empty: u64,
    pub skipped_malformed: u64,
    /// Directory holding the shard files; not serialized.
    #[serde(skip)]
    pub dir: PathBuf,
}

impl ShardManifest {
    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_path(&self, index: usize) -> PathBuf {
        self.dir.join(&self.shards[index].file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).ctx(|| format!("reading manifest {}", path.display()))?;
        let mut manifest: ShardManifest =
            serde_json::from_str(&text).ctx(|| format!("manifest {}", path.display()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::integrity(format!(
                "manifest {} has format version {}, expected {MANIFEST_VERSION}",
                path.display(),
                manifest.format_version
            )));
        }
        let counted: u64 = manifest.shards.iter().map(|s| s.records).sum();
        if counted != manifest.total_records {
            return Err(Error::integrity(format!(
                "manifest {} lists {counted} records across shards but total_records = {}",
                path.display(),
                manifest.total_records
            )));
        }
        manifest.dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).ctx(|| "serializing manifest".into())?;
        fs::write(&path, text + "\n").ctx(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Read one shard back, in stored order.
    pub fn read_shard(&self, index: usize) -> Result<Vec<SentenceRecord>> {
        let path = self.shard_path(index);
        let file = File::open(&path).map_err(|e| {
            Error::integrity(format!("shard {} ({}): {e}", index, path.display()))
        })?;
        let mut out = Vec::with_capacity(self.shards[index].records as usize);
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.ctx(|| format!("reading {}", path.display()))?;
            let rec: SentenceRecord = serde_json::from_str(&line)
                .ctx(|| format!("{} line {}", path.display(), lineno + 1))?;
            out.push(rec);
        }
        Ok(out)
    }

    /// All records across all shards, in ingest order.
    pub fn read_all(&self) -> Result<Vec<SentenceRecord>> {
        let mut out = Vec::with_capacity(self.total_records as usize);
        for i in 0..self.shard_count() {
            out.extend(self.read_shard(i)?);
        }
        Ok(out)
    }

    /// Recompute every shard digest and compare with the manifest.
    pub fn verify(&self) -> Result<()> {
        for (i, entry) in self.shards.iter().enumerate() {
            let path = self.shard_path(i);
            let bytes = fs::read(&path)
                .map_err(|e| Error::integrity(format!("shard {} ({}): {e}", i, path.display())))?;
            let digest = hex::encode(Sha256::digest(&bytes));
            if digest != entry.sha256 || bytes.len() as u64 != entry.bytes {
                return Err(Error::integrity(format!(
                    "shard {} ({}) does not match its manifest digest",
                    i,
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub records: u64,
    pub shards: u64,
    pub bytes: u64,
    pub skipped: u64,
}

/// Summarize a manifest, checking that every shard file is present with the recorded size.
pub fn corpus_stats(manifest: &ShardManifest) -> Result<CorpusStats> {
    let mut bytes = 0;
    for (i, entry) in manifest.shards.iter().enumerate() {
        let path = manifest.shard_path(i);
        let meta = fs::metadata(&path).map_err(|e| {
            Error::integrity(format!("missing shard {} ({}): {e}", i, path.display()))
        })?;
        if meta.len() != entry.bytes {
            return Err(Error::integrity(format!(
                "shard {} ({}) is {} bytes, manifest says {}",
                i,
                path.display(),
                meta.len(),
                entry.bytes
            )));
        }
        bytes += meta.len();
    }
    Ok(CorpusStats {
        records: manifest.total_records,
        shards: manifest.shards.len() as u64,
        bytes,
        skipped: manifest.skipped_empty + manifest.skipped_malformed,
    })
}

struct OpenShard {
    writer: BufWriter<File>,
    hasher: Sha256,
    file: String,
    records: u64,
    bytes: u64,
}

/// Streaming shard writer. Records go to shards in arrival order.
pub struct Ingestor {
    dir: PathBuf,
    shard_size: u64,
    seen: HashSet<String>,
    current: Option<OpenShard>,
    manifest: ShardManifest,
}

impl Ingestor {
    pub fn new(dir: impl Into<PathBuf>, shard_size: usize) -> Result<Self> {
        if shard_size == 0 {
            return Err(Error::config("shard_size must be at least 1"));
        }
        let dir = dir.into();
        fs::create_dir_all(&dir).ctx(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            manifest: ShardManifest {
                format_version: MANIFEST_VERSION,
                shard_size: shard_size as u64,
                shards: Vec::new(),
                total_records: 0,
                skipped_empty: 0,
                skipped_malformed: 0,
                dir: dir.clone(),
            },
            dir,
            shard_size: shard_size as u64,
            seen: HashSet::new(),
            current: None,
        })
    }

    /// Add one record. Empty text is skipped and counted; a repeated id aborts.
    pub fn push(&mut self, record: SentenceRecord) -> Result<()> {
        if record.text.trim().is_empty() || record.id.is_empty() {
            self.manifest.skipped_empty += 1;
            return Ok(());
        }
        if !self.seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        if self.current.is_none() {
            let index = self.manifest.shards.len();
            let file = format!("shard-{index:05}.jsonl");
            let path = self.dir.join(&file);
            let f = File::create(&path).ctx(|| format!("creating {}", path.display()))?;
            self.current = Some(OpenShard {
                writer: BufWriter::new(f),
                hasher: Sha256::new(),
                file,
                records: 0,
                bytes: 0,
            });
        }
        let shard = self.current.as_mut().expect("shard opened above");
        let mut line = serde_json::to_vec(&record).ctx(|| format!("serializing {}", record.id))?;
        line.push(b'\n');
        shard
            .writer
            .write_all(&line)
            .ctx(|| format!("writing {}", shard.file))?;
        shard.hasher.update(&line);
        shard.bytes += line.len() as u64;
        shard.records += 1;
        self.manifest.total_records += 1;
        if shard.records == self.shard_size {
            self.close_shard()?;
        }
        Ok(())
    }

    pub fn note_malformed(&mut self) {
        self.manifest.skipped_malformed += 1;
    }

    fn close_shard(&mut self) -> Result<()> {
        if let Some(mut shard) = self.current.take() {
            shard.writer.flush().ctx(|| format!("flushing {}", shard.file))?;
            self.manifest.shards.push(ShardEntry {
                file: shard.file,
                records: shard.records,
                bytes: shard.bytes,
                sha256: hex::encode(shard.hasher.finalize()),
            });
        }
        Ok(())
    }

    /// Close the last shard and write `manifest.json`.
    pub fn finish(mut self) -> Result<ShardManifest> {
        self.close_shard()?;
        self.manifest.save()?;
        Ok(self.manifest)
    }
}

/// Write `records` into `dir` as shards of `shard_size` records plus a manifest.
pub fn ingest<I>(records: I, dir: impl Into<PathBuf>, shard_size: usize) -> Result<ShardManifest>
where
    I: IntoIterator<Item = SentenceRecord>,
{
    let mut ingestor = Ingestor::new(dir, shard_size)?;
    for rec in records {
        ingestor.push(rec)?;
    }
    ingestor.finish()
}

/// Ingest a newline-delimited JSON record file; unparseable lines are skipped and counted.
pub fn ingest_jsonl(input: &Path, dir: impl Into<PathBuf>, shard_size: usize) -> Result<ShardManifest> {
    let file = File::open(input).ctx(|| format!("opening {}", input.display()))?;
    let mut ingestor = Ingestor::new(dir, shard_size)?;
    for line in BufReader::new(file).lines() {
        let line = line.ctx(|| format!("reading {}", input.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SentenceRecord>(&line) {
            Ok(rec) => ingestor.push(rec)?,
            Err(_) => ingestor.note_malformed(),
        }
    }
    ingestor.finish()
}
