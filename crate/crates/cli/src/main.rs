use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlm_adapt::chunkfile::{read_chunks, write_chunks, write_masked};
use mlm_adapt::config::{RunConfig, WORKDIR_ENV};
use mlm_adapt::corpus::{ingest_jsonl, ShardManifest};
use mlm_adapt::eval::{
    compare, evaluate_positions, read_position_log, write_position_log, EvalConfig, EvalReport,
};
use mlm_adapt::mask::{mask_chunk, MaskPolicy, MaskVocab};
use mlm_adapt::model::{TinyConfig, TinyEncoder};
use mlm_adapt::pack::{pack, PackConfig, DEFAULT_CHUNK_LEN};
use mlm_adapt::pipeline::{parse_stages, resolve_backend, run_pipeline, PipelineOptions, StageStatus};
use mlm_adapt::report::render_report;
use mlm_adapt::split::{split_with_unit, Split, SplitAssignment, SplitRatios, SplitUnit};
use mlm_adapt::synth::gen_synthetic_corpus;
use mlm_adapt::tokenizer::{resolve, TokenizerAdapter};
use mlm_adapt::train::{resume, train, TrainConfig, TrainControl, TrainData};
use mlm_adapt::{Error, Result};

#[derive(Parser)]
#[command(name = "mlm-adapt", version, about = "Masked-language-model domain adaptation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus and matching vocabulary.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        sentences: usize,
        #[arg(long, default_value_t = 200)]
        vocab: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shard a JSONL sentence corpus.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        shard_size: usize,
    },
    /// Assign every record to train/validation/test.
    Split {
        /// Shard manifest written by `ingest`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "sentence")]
        unit: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize one split and pack it into fixed-length chunks.
    Pack {
        #[arg(long)]
        manifest: PathBuf,
        /// Assignment written by `split`.
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "train")]
        which: String,
        #[arg(long)]
        tokenizer: String,
        #[arg(long, default_value_t = DEFAULT_CHUNK_LEN)]
        chunk_len: usize,
        #[arg(long)]
        delimiter: bool,
        #[arg(long)]
        framing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply seeded masking to a chunk file.
    Mask {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        tokenizer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a tiny encoder on packed chunks.
    Train(TrainArgs),
    /// Masked-token perplexity and top-k accuracy of one backend.
    Eval {
        #[arg(long)]
        backend: String,
        #[command(flatten)]
        eval: EvalArgs,
        /// Per-position log (origin, label, NLL, rank).
        #[arg(long)]
        positions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score two backends on identical masked inputs and tally paired outcomes.
    Compare {
        #[arg(long)]
        backend_a: String,
        #[arg(long)]
        backend_b: String,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the comparison table from two reports (`.json`) or position logs (`.tsv`).
    Report {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "A")]
        label_a: String,
        #[arg(long, default_value = "B")]
        label_b: String,
        #[arg(long)]
        caption: Option<String>,
    },
    /// Run pipeline stages from a run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `all` or a comma-separated list of stages.
        #[arg(long, default_value = "all")]
        stages: String,
        /// Rerun stages even when they are up to date.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, default_value_t = 0.15)]
    select_prob: f64,
    /// Mask,random,keep fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    sub: String,
}

impl PolicyArgs {
    fn policy(&self) -> Result<MaskPolicy> {
        MaskPolicy::with_sub(self.select_prob, &self.sub)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    chunks: PathBuf,
    #[arg(long)]
    tokenizer: String,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value = "1,2,5")]
    ks: String,
    #[arg(long)]
    restrict_to_mask_token: bool,
    #[command(flatten)]
    policy: PolicyArgs,
}

impl EvalArgs {
    fn config(&self) -> Result<EvalConfig> {
        let ks = self
            .ks
            .split(',')
            .map(|k| k.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::config(format!("bad --ks `{}`: {e}", self.ks)))?;
        let cfg = EvalConfig {
            ks,
            seed: self.seed,
            restrict_to_mask_token: self.restrict_to_mask_token,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key-value file with `TrainConfig` field names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    tokenizer: String,
    /// `tiny` for fresh weights or `tiny:<checkpoint dir>` to start from a checkpoint.
    #[arg(long, default_value = "tiny")]
    backend: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    ff: usize,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Continue the run recorded in --out.
    #[arg(long)]
    resume: bool,
    /// Resume even if the configuration changed.
    #[arg(long)]
    force: bool,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    stop_after: Option<usize>,
}

fn tokenizer_and_vocab(spec: &str) -> Result<(Box<dyn TokenizerAdapter>, MaskVocab)> {
    let tok = resolve(spec)?;
    let vocab = MaskVocab::from_tokenizer(&*tok)?;
    Ok((tok, vocab))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|source| Error::Io { context: format!("writing {}", path.display()), source })
}

fn print_report(label: &str, r: &EvalReport) {
    println!("{label}: perplexity {:.4} over {} labeled positions", r.perplexity, r.labeled_positions);
    for t in &r.top_k {
        println!("{label}: top-{} accuracy {:.4} ({} hits)", t.k, t.accuracy, t.hits);
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let (tok, vocab) = tokenizer_and_vocab(&a.tokenizer)?;
    let train_chunks = read_chunks(&a.train)?;
    let val_chunks = read_chunks(&a.val)?;
    let max_len = train_chunks.first().map_or(DEFAULT_CHUNK_LEN, |c| c.len());
    let mut model = match a.backend.as_str() {
        "tiny" => TinyEncoder::new(TinyConfig {
            layers: a.layers,
            hidden: a.hidden,
            heads: a.heads,
            ff: a.ff,
            init_seed: a.init_seed,
            tokenizer_digest: tok.digest(),
            ..TinyConfig::new(tok.vocab_size(), max_len)
        })?,
        s if s.starts_with("tiny:") => TinyEncoder::load(Path::new(&s[5..]), Some(tok.vocab_size()))?,
        s => {
            return Err(Error::config(format!(
                "backend `{s}` cannot be trained here; use `tiny` or `tiny:<checkpoint dir>`"
            )))
        }
    };
    let policy = a.policy.policy()?;
    let data = TrainData { train: &train_chunks, val: &val_chunks, policy: &policy, vocab: &vocab };
    let control = TrainControl { stop_after_steps: a.stop_after, quiet: false };
    let outcome = if a.resume {
        resume(&mut model, data, &cfg, &a.out, a.force, &control)?
    } else {
        train(&mut model, data, &cfg, &a.out, &control)?
    };
    println!("steps {}/{}", outcome.steps_done, outcome.total_steps);
    println!("initial val_loss {:.6}", outcome.initial_val_loss);
    if let Some(b) = outcome.best {
        println!("best step {} val_loss {:.6} at {}", b.step, b.val_loss, b.path.display());
    }
    Ok(())
}

fn load_report(path: &Path) -> Result<EvalReport> {
    if path.extension().is_some_and(|e| e == "tsv") {
        read_position_log(path)?.accumulator().report()
    } else {
        EvalReport::load(path)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { seed, sentences, vocab, out } => {
            let c = gen_synthetic_corpus(seed, sentences, vocab, &out)?;
            println!("{} sentences, {} tokens -> {}", c.sentences, c.tokens, c.corpus.display());
            println!("vocabulary -> {}", c.vocab.display());
        }
        Command::Ingest { input, out, shard_size } => {
            let m = ingest_jsonl(&input, &out, shard_size)?;
            println!(
                "{} records in {} shards; skipped {} empty, {} malformed",
                m.total_records,
                m.shard_count(),
                m.skipped_empty,
                m.skipped_malformed
            );
        }
        Command::Split { manifest, ratios, seed, unit, out } => {
            let m = ShardManifest::load(&manifest)?;
            let ratios: SplitRatios = ratios.parse()?;
            let unit: SplitUnit = unit.parse()?;
            let a = split_with_unit(&m, ratios, seed, unit)?;
            write_json(&out, &a)?;
            let [tr, va, te] = a.counts();
            println!("train {tr}, validation {va}, test {te}");
        }
        Command::Pack { manifest, split, which, tokenizer, chunk_len, delimiter, framing, out } => {
            let m = ShardManifest::load(&manifest)?;
            let text = fs::read_to_string(&split)
                .map_err(|source| Error::Io { context: format!("reading {}", split.display()), source })?;
            let a: SplitAssignment = serde_json::from_str(&text)
                .map_err(|source| Error::Json { context: split.display().to_string(), source })?;
            let which: Split = which.parse()?;
            let tok = resolve(&tokenizer)?;
            let mut pc = PackConfig::for_tokenizer(&*tok, chunk_len);
            if delimiter {
                pc = pc.with_delimiter(&*tok)?;
            }
            if framing {
                pc = pc.with_framing(&*tok)?;
            }
            let mut chunks = Vec::new();
            for shard in 0..m.shard_count() {
                let mut seqs = Vec::new();
                for r in m.read_shard(shard)? {
                    if a.assignment.get(&r.id) == Some(&which) {
                        seqs.push(tok.encode(&r.text)?);
                    }
                }
                chunks.extend(pack(seqs, pc, shard as u32)?);
            }
            write_chunks(&out, &chunks, pc.pad_id, chunk_len)?;
            println!("{} chunks of {chunk_len} -> {}", chunks.len(), out.display());
        }
        Command::Mask { chunks, tokenizer, seed, policy, out } => {
            let (_, vocab) = tokenizer_and_vocab(&tokenizer)?;
            let policy = policy.policy()?;
            let chunks = read_chunks(&chunks)?;
            let masked: Vec<_> = chunks.iter().map(|c| mask_chunk(c, &policy, &vocab, seed)).collect();
            let len = chunks.first().map_or(DEFAULT_CHUNK_LEN, |c| c.len());
            write_masked(&out, &masked, vocab.pad_id, len)?;
            let labeled: usize = masked.iter().map(|e| e.num_labeled()).sum();
            println!("{} chunks, {labeled} labeled positions -> {}", masked.len(), out.display());
        }
        Command::Train(a) => cmd_train(&a)?,
        Command::Eval { backend, eval, positions, out } => {
            let (tok, vocab) = tokenizer_and_vocab(&eval.tokenizer)?;
            let cfg = eval.config()?;
            let chunks = read_chunks(&eval.chunks)?;
            let b = resolve_backend(&backend, None, tok.vocab_size())?;
            let (acc, recs) = evaluate_positions(&*b, &chunks, &eval.policy.policy()?, &vocab, &cfg)?;
            let report = acc.report()?;
            print_report(&backend, &report);
            if let Some(p) = positions {
                write_position_log(&p, &acc.digest, &acc.ks, &recs)?;
            }
            if let Some(p) = out {
                report.save(&p)?;
            }
        }
        Command::Compare { backend_a, backend_b, eval, out } => {
            let (tok, vocab) = tokenizer_and_vocab(&eval.tokenizer)?;
            let cfg = eval.config()?;
            let chunks = read_chunks(&eval.chunks)?;
            let a = resolve_backend(&backend_a, None, tok.vocab_size())?;
            let b = resolve_backend(&backend_b, None, tok.vocab_size())?;
            let c = compare(&*a, &*b, &chunks, &eval.policy.policy()?, &vocab, &cfg)?;
            print_report("A", &c.a);
            print_report("B", &c.b);
            for cell in &c.tally.cells {
                println!(
                    "top-{}: both_hit {} a_only {} b_only {} both_miss {}",
                    cell.k, cell.both_hit, cell.a_only, cell.b_only, cell.both_miss
                );
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)
                    .map_err(|source| Error::Io { context: format!("creating {}", dir.display()), source })?;
                c.a.save(&dir.join("a.json"))?;
                c.b.save(&dir.join("b.json"))?;
                write_json(&dir.join("tally.json"), &c.tally)?;
                write_position_log(&dir.join("a.positions.tsv"), &c.a.config_digest, &cfg.ks, &c.a_positions)?;
                write_position_log(&dir.join("b.positions.tsv"), &c.b.config_digest, &cfg.ks, &c.b_positions)?;
            }
        }
        Command::Report { a, b, label_a, label_b, caption } => {
            let ra = load_report(&a)?;
            let rb = load_report(&b)?;
            print!("{}", render_report(&ra, &rb, (&label_a, &label_b), caption.as_deref())?);
        }
        Command::Run { config, stages, force, quiet } => {
            let cfg = RunConfig::load(&config)?;
            let stages = parse_stages(&stages)?;
            let opts = PipelineOptions { quiet, force };
            for (stage, status) in run_pipeline(&cfg, &stages, &opts)? {
                let s = match status {
                    StageStatus::Ran => "ran",
                    StageStatus::UpToDate => "up to date",
                };
                println!("{stage}: {s}");
            }
            if !quiet && std::env::var_os(WORKDIR_ENV).is_some() {
                eprintln!("work directory from {WORKDIR_ENV}: {}", cfg.paths.workdir.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
