//! Seeded synthetic corpus for desk-scale runs and tests.
//!
//! Sentences come from a small set of templates mixing fixed formulaic
//! phrases with Zipf-distributed free slots, so the unigram distribution is
//! heavily skewed and much of the text is predictable from context.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::SentenceRecord;
use crate::error::{Error, IoContext, Result};
use crate::tokenizer::WordTokenizer;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

const SYLLABLES: [&str; 16] = [
    "ka", "mi", "to", "re", "sa", "lo", "ne", "vi", "du", "pa", "shi", "ro", "ga", "te", "bu", "el",
];
const TEMPLATES: usize = 24;
const SENTENCES_PER_SESSION: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub sentences: usize,
    pub tokens: usize,
}

/// Pronounceable word for index `i`; distinct for distinct `i`.
pub fn word(i: usize) -> String {
    let mut n = i;
    let mut w = String::new();
    loop {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
        if n == 0 {
            break;
        }
        n -= 1;
    }
    w
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Fixed(usize),
    Free,
}

/// In-memory generation; see [`gen_synthetic_corpus`].
pub fn synthetic_records(seed: u64, sentences: usize, vocab: usize) -> Result<Vec<SentenceRecord>> {
    if sentences == 0 {
        return Err(Error::config("synthetic corpus needs at least one sentence"));
    }
    if vocab < 10 {
        return Err(Error::config("synthetic vocabulary needs at least 10 words"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = WeightedIndex::new((0..vocab).map(|r| 1.0 / (r as f64 + 1.0).powf(1.1))).expect("positive weights");
    let templates: Vec<Vec<Slot>> = (0..TEMPLATES)
        .map(|_| {
            let len = rng.gen_range(6..=14);
            (0..len)
                .map(|_| if rng.gen_bool(0.6) { Slot::Fixed(zipf.sample(&mut rng)) } else { Slot::Free })
                .collect()
        })
        .collect();
    let pick = WeightedIndex::new((0..TEMPLATES).map(|t| 1.0 / (t as f64 + 1.0))).expect("positive weights");
    let words: Vec<String> = (0..vocab).map(word).collect();

    let mut out = Vec::with_capacity(sentences);
    for i in 0..sentences {
        let session = i / SENTENCES_PER_SESSION;
        let text: Vec<&str> = templates[pick.sample(&mut rng)]
            .iter()
            .map(|s| match *s {
                Slot::Fixed(w) => words[w].as_str(),
                Slot::Free => words[zipf.sample(&mut rng)].as_str(),
            })
            .collect();
        let tag = if session % 3 == 2 { "committee" } else { "plenary" };
        out.push(SentenceRecord::new(format!("session{session:05}/{i:07}"), text.join(" "), tag));
    }
    Ok(out)
}

/// Write `corpus.jsonl` and a matching `vocab.txt` into `dir`.
pub fn gen_synthetic_corpus(seed: u64, sentences: usize, vocab: usize, dir: &Path) -> Result<SyntheticCorpus> {
    let records = synthetic_records(seed, sentences, vocab)?;
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    let corpus = dir.join(CORPUS_FILE);
    let file = File::create(&corpus).ctx(|| format!("creating {}", corpus.display()))?;
    let mut w = BufWriter::new(file);
    let mut tokens = 0;
    for r in &records {
        tokens += r.text.split_whitespace().count();
        let line = serde_json::to_string(r).ctx(|| "synthetic record".to_string())?;
        writeln!(w, "{line}").ctx(|| format!("writing {}", corpus.display()))?;
    }
    w.flush().ctx(|| format!("writing {}", corpus.display()))?;
    let vocab_path = dir.join(VOCAB_FILE);
    WordTokenizer::from_words((0..vocab).map(word))?.save(&vocab_path)?;
    Ok(SyntheticCorpus { corpus, vocab: vocab_path, sentences, tokens })
}
