//! Binary chunk files.
//!
//! All integers little-endian:
//!
//! ```text
//! 0   magic        8 bytes  "MLMCHUNK"
//! 8   version      u32      1
//! 12  kind         u32      0 = token chunks, 1 = masked examples
//! 16  chunk_len    u32
//! 20  pad_id       u32
//! 24  ignore_label u32      label sentinel for masked files (u32::MAX)
//! 28  run_count    u32
//! 32  count        u64      number of rows
//! 40  runs         run_count x (shard u32, first_chunk u32, len u32)
//! ..  ids          count x chunk_len x u32, row-major
//! ..  labels       count x chunk_len x u32 (masked files only)
//! ```
//!
//! Origins are stored as runs of consecutive chunk indices within a shard.
//! Attention is not stored; it is `id != pad_id`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::mask::{MaskedExample, IGNORE};
use crate::pack::TokenChunk;
use crate::Origin;

pub const MAGIC: &[u8; 8] = b"MLMCHUNK";
pub const VERSION: u32 = 1;
pub const FIXED_HEADER_LEN: u64 = 40;
pub const RUN_LEN: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkFileKind {
    Chunks = 0,
    Masked = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OriginRun {
    pub shard: u32,
    pub first_chunk: u32,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkFileHeader {
    pub version: u32,
    pub kind: ChunkFileKind,
    pub chunk_len: u32,
    pub pad_id: u32,
    pub ignore_label: u32,
    pub count: u64,
    pub runs: Vec<OriginRun>,
}

impl ChunkFileHeader {
    /// Bytes before the first id row (fixed header plus run table).
    pub fn header_len(&self) -> u64 {
        FIXED_HEADER_LEN + RUN_LEN * self.runs.len() as u64
    }

    pub fn row_bytes(&self) -> u64 {
        u64::from(self.chunk_len) * 4
    }

    pub fn file_len(&self) -> u64 {
        let arrays = if self.kind == ChunkFileKind::Masked { 2 } else { 1 };
        self.header_len() + arrays * self.count * self.row_bytes()
    }

    pub fn origins(&self) -> impl Iterator<Item = Origin> + '_ {
        self.runs
            .iter()
            .flat_map(|r| (0..r.len).map(move |i| Origin::new(r.shard, r.first_chunk + i)))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            self.version,
            self.kind as u32,
            self.chunk_len,
            self.pad_id,
            self.ignore_label,
            self.runs.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.count.to_le_bytes())?;
        for r in &self.runs {
            for v in [r.shard, r.first_chunk, r.len] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn read_from(path: &Path, r: &mut impl Read, file_len: u64) -> Result<Self> {
        let mut fixed = [0u8; FIXED_HEADER_LEN as usize];
        if file_len < FIXED_HEADER_LEN {
            return Err(Error::format(path, file_len, "truncated header"));
        }
        r.read_exact(&mut fixed).ctx(|| format!("reading {}", path.display()))?;
        if &fixed[..8] != MAGIC {
            return Err(Error::format(path, 0, "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(fixed[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::format(path, 8, format!("unsupported version {version}")));
        }
        let kind = match u32_at(12) {
            0 => ChunkFileKind::Chunks,
            1 => ChunkFileKind::Masked,
            k => return Err(Error::format(path, 12, format!("unknown kind {k}"))),
        };
        let chunk_len = u32_at(16);
        if chunk_len == 0 {
            return Err(Error::format(path, 16, "chunk_len is zero"));
        }
        let run_count = u32_at(28);
        let count = u64::from_le_bytes(fixed[32..40].try_into().unwrap());
        let runs_end = FIXED_HEADER_LEN + RUN_LEN * u64::from(run_count);
        if file_len < runs_end {
            return Err(Error::format(path, file_len, "truncated run table"));
        }
        let mut table = vec![0u8; (runs_end - FIXED_HEADER_LEN) as usize];
        r.read_exact(&mut table).ctx(|| format!("reading {}", path.display()))?;
        let runs: Vec<OriginRun> = table
            .chunks_exact(RUN_LEN as usize)
            .map(|b| OriginRun {
                shard: u32::from_le_bytes(b[0..4].try_into().unwrap()),
                first_chunk: u32::from_le_bytes(b[4..8].try_into().unwrap()),
                len: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            })
            .collect();
        let listed: u64 = runs.iter().map(|r| u64::from(r.len)).sum();
        if listed != count {
            return Err(Error::format(
                path,
                FIXED_HEADER_LEN,
                format!("run table covers {listed} rows but count is {count}"),
            ));
        }
        let header = Self {
            version,
            kind,
            chunk_len,
            pad_id: u32_at(20),
            ignore_label: u32_at(24),
            count,
            runs,
        };
        if file_len != header.file_len() {
            return Err(Error::format(
                path,
                file_len.min(header.file_len()),
                format!("file is {file_len} bytes, header implies {}", header.file_len()),
            ));
        }
        Ok(header)
    }
}

fn runs_of(origins: impl Iterator<Item = Origin>) -> Vec<OriginRun> {
    let mut runs: Vec<OriginRun> = Vec::new();
    for o in origins {
        match runs.last_mut() {
            Some(r) if r.shard == o.shard && r.first_chunk.checked_add(r.len) == Some(o.chunk) => r.len += 1,
            _ => runs.push(OriginRun {
                shard: o.shard,
                first_chunk: o.chunk,
                len: 1,
            }),
        }
    }
    runs
}

fn write_rows<'a>(w: &mut impl Write, rows: impl Iterator<Item = &'a [u32]>) -> std::io::Result<()> {
    for row in rows {
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn check_len(len: usize, chunk_len: usize, origin: Origin) -> Result<()> {
    if len != chunk_len {
        return Err(Error::integrity(format!(
            "chunk {origin:?} has length {len}, file chunk_len is {chunk_len}"
        )));
    }
    Ok(())
}

/// Write token chunks. `chunk_len` is taken from the first chunk, or `default_len` when empty.
pub fn write_chunks(path: &Path, chunks: &[TokenChunk], pad_id: u32, default_len: usize) -> Result<ChunkFileHeader> {
    let chunk_len = chunks.first().map_or(default_len, TokenChunk::len);
    for c in chunks {
        check_len(c.len(), chunk_len, c.origin)?;
    }
    let header = ChunkFileHeader {
        version: VERSION,
        kind: ChunkFileKind::Chunks,
        chunk_len: chunk_len as u32,
        pad_id,
        ignore_label: IGNORE,
        count: chunks.len() as u64,
        runs: runs_of(chunks.iter().map(|c| c.origin)),
    };
    let file = File::create(path).ctx(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    (|| {
        header.write_to(&mut w)?;
        write_rows(&mut w, chunks.iter().map(|c| c.ids.as_slice()))?;
        w.flush()
    })()
    .ctx(|| format!("writing {}", path.display()))?;
    Ok(header)
}

/// Write masked examples: ids are the corrupted inputs, followed by a parallel label array.
pub fn write_masked(path: &Path, examples: &[MaskedExample], pad_id: u32, default_len: usize) -> Result<ChunkFileHeader> {
    let chunk_len = examples.first().map_or(default_len, |e| e.input_ids.len());
    for e in examples {
        check_len(e.input_ids.len(), chunk_len, e.origin)?;
        check_len(e.labels.len(), chunk_len, e.origin)?;
    }
    let header = ChunkFileHeader {
        version: VERSION,
        kind: ChunkFileKind::Masked,
        chunk_len: chunk_len as u32,
        pad_id,
        ignore_label: IGNORE,
        count: examples.len() as u64,
        runs: runs_of(examples.iter().map(|e| e.origin)),
    };
    let file = File::create(path).ctx(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    (|| {
        header.write_to(&mut w)?;
        write_rows(&mut w, examples.iter().map(|e| e.input_ids.as_slice()))?;
        write_rows(&mut w, examples.iter().map(|e| e.labels.as_slice()))?;
        w.flush()
    })()
    .ctx(|| format!("writing {}", path.display()))?;
    Ok(header)
}

pub fn read_header(path: &Path) -> Result<ChunkFileHeader> {
    let file = File::open(path).ctx(|| format!("opening {}", path.display()))?;
    let len = file.metadata().ctx(|| format!("stat {}", path.display()))?.len();
    ChunkFileHeader::read_from(path, &mut BufReader::new(file), len)
}

/// Streaming reader over the rows of a chunk file.
pub struct ChunkReader {
    path: PathBuf,
    header: ChunkFileHeader,
    ids: BufReader<File>,
    labels: Option<BufReader<File>>,
    origins: Vec<Origin>,
    next: usize,
}

impl ChunkReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).ctx(|| format!("opening {}", path.display()))?;
        let len = file.metadata().ctx(|| format!("stat {}", path.display()))?.len();
        let mut ids = BufReader::new(file);
        let header = ChunkFileHeader::read_from(path, &mut ids, len)?;
        let labels = if header.kind == ChunkFileKind::Masked {
            let mut f = File::open(path).ctx(|| format!("opening {}", path.display()))?;
            f.seek(SeekFrom::Start(header.header_len() + header.count * header.row_bytes()))
                .ctx(|| format!("seeking {}", path.display()))?;
            Some(BufReader::new(f))
        } else {
            None
        };
        let origins = header.origins().collect();
        Ok(Self {
            path: path.to_path_buf(),
            header,
            ids,
            labels,
            origins,
            next: 0,
        })
    }

    pub fn header(&self) -> &ChunkFileHeader {
        &self.header
    }

    fn read_row(path: &Path, r: &mut impl Read, chunk_len: usize, offset: u64) -> Result<Vec<u32>> {
        let mut buf = vec![0u8; chunk_len * 4];
        r.read_exact(&mut buf)
            .map_err(|e| Error::format(path, offset, format!("truncated row: {e}")))?;
        Ok(buf
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn row_offset(&self, array: u64) -> u64 {
        self.header.header_len() + (array * self.header.count + self.next as u64) * self.header.row_bytes()
    }

    /// Next row as `(origin, ids, labels)`.
    fn next_row(&mut self) -> Option<Result<(Origin, Vec<u32>, Option<Vec<u32>>)>> {
        if self.next as u64 >= self.header.count {
            return None;
        }
        let chunk_len = self.header.chunk_len as usize;
        let ids_offset = self.row_offset(0);
        let labels_offset = self.row_offset(1);
        let ids = match Self::read_row(&self.path, &mut self.ids, chunk_len, ids_offset) {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        let labels = match self.labels.as_mut() {
            Some(r) => match Self::read_row(&self.path, r, chunk_len, labels_offset) {
                Ok(v) => Some(v),
                Err(e) => return Some(Err(e)),
            },
            None => None,
        };
        let origin = self.origins[self.next];
        self.next += 1;
        Some(Ok((origin, ids, labels)))
    }

    /// Iterate as token chunks. For masked files these are the corrupted inputs.
    pub fn chunks(mut self) -> impl Iterator<Item = Result<TokenChunk>> {
        let pad = self.header.pad_id;
        std::iter::from_fn(move || {
            self.next_row()
                .map(|r| r.map(|(origin, ids, _)| TokenChunk::from_ids(ids, pad, origin)))
        })
    }

    /// Iterate as masked examples; errors on plain chunk files.
    pub fn masked(mut self) -> Result<impl Iterator<Item = Result<MaskedExample>>> {
        if self.header.kind != ChunkFileKind::Masked {
            return Err(Error::format(&self.path, 12, "not a masked-example file"));
        }
        let pad = self.header.pad_id;
        let ignore = self.header.ignore_label;
        Ok(std::iter::from_fn(move || {
            self.next_row().map(|r| {
                r.map(|(origin, input_ids, labels)| {
                    let labels = labels
                        .unwrap_or_default()
                        .into_iter()
                        .map(|l| if l == ignore { IGNORE } else { l })
                        .collect();
                    MaskedExample::new(input_ids, labels, pad, origin)
                })
            })
        }))
    }
}

/// Read every chunk of a chunk file into memory.
pub fn read_chunks(path: &Path) -> Result<Vec<TokenChunk>> {
    ChunkReader::open(path)?.chunks().collect()
}

pub fn read_masked(path: &Path) -> Result<Vec<MaskedExample>> {
    ChunkReader::open(path)?.masked()?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn chunk(shard: u32, idx: u32, ids: Vec<u32>) -> TokenChunk {
        TokenChunk::from_ids(ids, 0, Origin::new(shard, idx))
    }

    #[test]
    fn zero_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.chunks");
        let h = write_chunks(&path, &[], 0, 256).unwrap();
        assert_eq!(h.count, 0);
        assert_eq!(h.chunk_len, 256);
        assert!(read_chunks(&path).unwrap().is_empty());
    }

    #[test]
    fn three_chunk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.chunks");
        let chunks = vec![
            chunk(0, 0, vec![5, 6, 7, 8]),
            chunk(0, 1, vec![9, 5, 0, 0]),
            chunk(3, 0, vec![7, 7, 7, 0]),
        ];
        let h = write_chunks(&path, &chunks, 0, 4).unwrap();
        assert_eq!(h.runs.len(), 2);
        assert_eq!(read_chunks(&path).unwrap(), chunks);
        assert_eq!(fs::metadata(&path).unwrap().len(), h.file_len());
    }

    #[test]
    fn masked_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.masked");
        let ex = vec![
            MaskedExample::new(vec![2, 6, 0], vec![5, IGNORE, IGNORE], 0, Origin::new(1, 4)),
            MaskedExample::new(vec![7, 2, 9], vec![IGNORE, 8, IGNORE], 0, Origin::new(1, 5)),
        ];
        write_masked(&path, &ex, 0, 3).unwrap();
        assert_eq!(read_masked(&path).unwrap(), ex);
        // reading a masked file as chunks yields the corrupted inputs
        let as_chunks = read_chunks(&path).unwrap();
        assert_eq!(as_chunks[1].ids, vec![7, 2, 9]);
    }

    #[test]
    fn mixed_lengths_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let chunks = vec![chunk(0, 0, vec![5, 6]), chunk(0, 1, vec![5, 6, 7])];
        assert!(write_chunks(&dir.path().join("x"), &chunks, 0, 2).is_err());
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.chunks");
        write_chunks(&path, &[chunk(0, 0, vec![5, 6, 7, 8])], 0, 4).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_chunks(&path), Err(Error::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[8] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_chunks(&path), Err(Error::Format { offset: 8, .. })));

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        match read_chunks(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, good.len() as u64 - 3),
            other => panic!("expected truncation error, got {other:?}"),
        }

        fs::write(&path, &good[..20]).unwrap();
        assert!(matches!(read_chunks(&path), Err(Error::Format { offset: 20, .. })));
    }

    #[test]
    fn masked_reader_refuses_plain_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.chunks");
        write_chunks(&path, &[chunk(0, 0, vec![5, 6])], 0, 2).unwrap();
        assert!(read_masked(&path).is_err());
    }
}
