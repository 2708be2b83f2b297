#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use mlm_adapt::keyed::{below, key, mix64};
use mlm_adapt::mask::{mask_chunk, MaskPolicy, MaskVocab, MaskedExample, IGNORE};
use mlm_adapt::pack::TokenChunk;
use mlm_adapt::model::{Backend, OptimizerConfig, PositionLogits, TinyConfig, TinyEncoder, TrainableBackend};
use mlm_adapt::Origin;

/// Tiny fp32 configuration used for gradient checking.
pub fn gradcheck_model() -> TinyEncoder {
    let cfg = TinyConfig {
        layers: 2,
        hidden: 16,
        heads: 4,
        ff: 32,
        init_seed: 11,
        ..TinyConfig::new(24, 8)
    };
    TinyEncoder::new(cfg).unwrap()
}

pub fn gradcheck_batch() -> Vec<MaskedExample> {
    vec![
        MaskedExample::new(
            vec![5, 2, 7, 8, 2, 9, 0, 0],
            vec![IGNORE, 6, IGNORE, 20, 11, IGNORE, IGNORE, IGNORE],
            0,
            Origin::new(0, 0),
        ),
        MaskedExample::new(
            vec![12, 13, 2, 15, 16, 23, 18, 19],
            vec![10, IGNORE, 14, IGNORE, IGNORE, 17, IGNORE, 21],
            0,
            Origin::new(0, 1),
        ),
    ]
}

pub struct GradCheck {
    pub sampled: usize,
    pub passed: usize,
    pub worst: Vec<(String, f64, f64)>,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.sampled as f64
    }
}

/// Naive f64 re-implementation of the encoder's mean masked-LM loss, reading
/// parameters by tensor name. Used as the finite-difference target.
pub struct Reference {
    cfg: TinyConfig,
    tensors: HashMap<String, Range<usize>>,
}

type Mat = Vec<Vec<f64>>;

impl Reference {
    pub fn new(model: &TinyEncoder) -> Self {
        Self { cfg: model.config().clone(), tensors: model.tensor_ranges().into_iter().collect() }
    }

    fn t<'a>(&self, p: &'a [f64], name: &str) -> &'a [f64] {
        &p[self.tensors[name].clone()]
    }

    fn affine(&self, x: &Mat, w: &[f64], b: Option<&[f64]>, out: usize) -> Mat {
        x.iter()
            .map(|row| {
                (0..out)
                    .map(|j| {
                        let dot: f64 = row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum();
                        dot + b.map_or(0.0, |b| b[j])
                    })
                    .collect()
            })
            .collect()
    }

    fn norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let s = (var + 1e-5).sqrt();
                row.iter().enumerate().map(|(c, v)| (v - mean) / s * g[c] + b[c]).collect()
            })
            .collect()
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    pub fn mean_loss(&self, p: &[f64], batch: &[MaskedExample]) -> f64 {
        let (h, nh, f, v) = (self.cfg.hidden, self.cfg.heads, self.cfg.ff, self.cfg.vocab_size);
        let d = h / nh;
        let (mut total, mut count) = (0.0, 0usize);
        for ex in batch {
            let len = ex.input_ids.len();
            let tok = self.t(p, "tok_emb");
            let pos = self.t(p, "pos_emb");
            let e: Mat = (0..len)
                .map(|i| (0..h).map(|c| tok[ex.input_ids[i] as usize * h + c] + pos[i * h + c]).collect())
                .collect();
            let mut x = Self::norm(&e, self.t(p, "emb_ln.gamma"), self.t(p, "emb_ln.beta"));
            for l in 0..self.cfg.layers {
                let n = |s: &str| format!("layer{l}.{s}");
                let q = self.affine(&x, self.t(p, &n("attn.wq")), Some(self.t(p, &n("attn.bq"))), h);
                let k = self.affine(&x, self.t(p, &n("attn.wk")), None, h);
                let vv = self.affine(&x, self.t(p, &n("attn.wv")), Some(self.t(p, &n("attn.bv"))), h);
                let mut ctx = vec![vec![0.0; h]; len];
                for head in 0..nh {
                    let cols = head * d..(head + 1) * d;
                    for i in 0..len {
                        let scores: Vec<f64> = (0..len)
                            .map(|j| {
                                if ex.attention[j] {
                                    cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt()
                                } else {
                                    f64::NEG_INFINITY
                                }
                            })
                            .collect();
                        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                        for j in 0..len {
                            let w = (scores[j] - max).exp() / z;
                            for c in cols.clone() {
                                ctx[i][c] += w * vv[j][c];
                            }
                        }
                    }
                }
                let o = self.affine(&ctx, self.t(p, &n("attn.wo")), Some(self.t(p, &n("attn.bo"))), h);
                let h1 = Self::norm(&Self::add(&x, &o), self.t(p, &n("ln1.gamma")), self.t(p, &n("ln1.beta")));
                let u = self.affine(&h1, self.t(p, &n("ff.w1")), Some(self.t(p, &n("ff.b1"))), f);
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let g: Mat = u
                    .iter()
                    .map(|r| r.iter().map(|&z| 0.5 * z * (1.0 + (c * (z + 0.044715 * z.powi(3))).tanh())).collect())
                    .collect();
                let ffo = self.affine(&g, self.t(p, &n("ff.w2")), Some(self.t(p, &n("ff.b2"))), h);
                x = Self::norm(&Self::add(&h1, &ffo), self.t(p, &n("ln2.gamma")), self.t(p, &n("ln2.beta")));
            }
            let logits = self.affine(&x, self.t(p, "out.w"), Some(self.t(p, "out.b")), v);
            for (i, row) in logits.iter().enumerate() {
                let label = ex.labels[i];
                if label == IGNORE {
                    continue;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
                total += lse - row[label as usize];
                count += 1;
            }
        }
        total / count as f64
    }
}

/// Compare the fp32 analytic gradient of the mean loss with central
/// differences of the f64 reference on `per_tensor` keyed-random coordinates
/// of every parameter tensor.
pub fn gradient_check(per_tensor: usize, eps: f64, tol: f64) -> GradCheck {
    let mut model = gradcheck_model();
    let batch = gradcheck_batch();
    model.zero_grad();
    let (_, count) = model.accumulate_gradients(&batch).unwrap();
    let analytic: Vec<f64> = model.grads().iter().map(|&g| g as f64 / count as f64).collect();
    let reference = Reference::new(&model);
    let mut params: Vec<f64> = model.params().iter().map(|&p| p as f64).collect();

    let mut sampled = 0;
    let mut passed = 0;
    let mut worst = Vec::new();
    for (t, (name, range)) in model.tensor_ranges().into_iter().enumerate() {
        for s in 0..per_tensor {
            let idx = range.start + below(key(&[t as u64, s as u64, 99]), range.len() as u64) as usize;
            let orig = params[idx];
            params[idx] = orig + eps;
            let up = reference.mean_loss(&params, &batch);
            params[idx] = orig - eps;
            let down = reference.mean_loss(&params, &batch);
            params[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom == 0.0 { 0.0 } else { (a - numeric).abs() / denom };
            sampled += 1;
            if rel <= tol {
                passed += 1;
            } else {
                worst.push((format!("{name}[{}]", idx - range.start), a, numeric));
            }
        }
    }
    GradCheck { sampled, passed, worst }
}

/// Vocabulary of 1000 ids with the word tokenizer's special layout.
pub fn mask_vocab() -> MaskVocab {
    MaskVocab::new(1000, 0, 2, vec![1, 3, 4]).unwrap()
}

/// `n` keyed-random chunks of length `len`; roughly one in eight ends in padding.
pub fn random_chunks(n: usize, len: usize, seed: u64) -> Vec<TokenChunk> {
    (0..n)
        .map(|c| {
            let k = key(&[seed, c as u64]);
            let valid = if k % 8 == 0 { 1 + below(mix64(k), len as u64) as usize } else { len };
            let mut ids: Vec<u32> = (0..valid).map(|i| 1 + below(key(&[k, i as u64]), 999) as u32).collect();
            ids.resize(len, 0);
            TokenChunk::from_ids(ids, 0, Origin::new((c / 100) as u32, (c % 100) as u32))
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct MaskingStats {
    pub eligible: u64,
    pub selected: u64,
    pub mask: u64,
    pub random: u64,
    pub keep: u64,
}

impl MaskingStats {
    pub fn selection_rate(&self) -> f64 {
        self.selected as f64 / self.eligible as f64
    }

    pub fn composition(&self) -> [f64; 3] {
        let s = self.selected as f64;
        [self.mask as f64 / s, self.random as f64 / s, self.keep as f64 / s]
    }
}

/// Count masking outcomes by direct inspection of masked examples until at
/// least `min_eligible` eligible positions have been seen.
pub fn masking_stats(min_eligible: u64, seed: u64) -> MaskingStats {
    let vocab = mask_vocab();
    let policy = MaskPolicy::default();
    let mut st = MaskingStats::default();
    let mut batch = 0;
    while st.eligible < min_eligible {
        let chunks = random_chunks(1000, 256, key(&[seed, batch]));
        for c in &chunks {
            let ex = mask_chunk(c, &policy, &vocab, seed);
            for i in 0..c.ids.len() {
                if !c.attention[i] || vocab.is_special(c.ids[i]) {
                    continue;
                }
                st.eligible += 1;
                if ex.labels[i] == IGNORE {
                    continue;
                }
                st.selected += 1;
                if ex.input_ids[i] == vocab.mask_id {
                    st.mask += 1;
                } else if ex.input_ids[i] == c.ids[i] {
                    // a random draw equal to the original counts as keep here;
                    // with ~995 candidates that is ~0.1% of random draws
                    st.keep += 1;
                } else {
                    st.random += 1;
                }
            }
        }
        batch += 1;
    }
    st
}

/// `n` keyed-random token sequences of length 0..120 over non-special ids.
pub fn random_sequences(n: usize, seed: u64) -> Vec<Vec<u32>> {
    (0..n)
        .map(|s| {
            let k = key(&[seed, s as u64]);
            let len = below(k, 120) as usize;
            (0..len).map(|i| 5 + below(key(&[k, i as u64]), 995) as u32).collect()
        })
        .collect()
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Replay both recorded per-position logs and render them side by side.
pub fn recorded_table() -> mlm_adapt::Result<mlm_adapt::report::ReportTable> {
    let a = mlm_adapt::eval::replay(&fixture("recorded_a.positions.tsv"))?.report()?;
    let b = mlm_adapt::eval::replay(&fixture("recorded_b.positions.tsv"))?.report()?;
    mlm_adapt::report::render_report(&a, &b, ("fine-tuned", "base"), None)
}

/// The cells the recorded logs must reproduce, row by row.
pub const RECORDED_CELLS: [(&str, &str, &str); 4] = [
    ("Perplexity", "6.60", "22.87"),
    ("Top-1 Accuracy", "52.55%", "48.02%"),
    ("Top-2 Accuracy", "63.07%", "58.60%"),
    ("Top-5 Accuracy", "73.59%", "68.98%"),
];

/// Run configuration for the desk-scale adaptation run: about 50K tokens of
/// synthetic text and a small encoder, sized to finish in well under a minute.
pub fn desk_config(root: &std::path::Path) -> (mlm_adapt::config::RunConfig, usize) {
    let c = mlm_adapt::synth::gen_synthetic_corpus(7, 5850, 200, &root.join("corpus")).unwrap();
    let tokens = c.tokens;
    let mut cfg = mlm_adapt::config::RunConfig::default();
    cfg.paths.corpus = c.corpus;
    cfg.paths.workdir = root.join("work");
    cfg.tokenizer.spec = format!("word:{}", c.vocab.display());
    cfg.pack.chunk_len = 64;
    cfg.model.hidden = 64;
    cfg.model.ff = 256;
    cfg.train.per_device_batch = 8;
    cfg.train.accumulation_steps = 1;
    cfg.train.learning_rate = 1e-3;
    cfg.train.epochs = 2;
    (cfg, tokens)
}

pub struct DeskRun {
    pub tokens: usize,
    /// Fine-tuned (best checkpoint) and initial model on the validation split.
    pub val: mlm_adapt::eval::Comparison,
    /// The same pair on the test split, as written by the compare stage.
    pub test: (mlm_adapt::eval::EvalReport, mlm_adapt::eval::EvalReport),
    pub elapsed: std::time::Duration,
}

pub fn desk_run(root: &std::path::Path) -> mlm_adapt::Result<DeskRun> {
    use mlm_adapt::pipeline::{resolve_backend, run_pipeline, PipelineOptions, Stage, Workdir};
    use mlm_adapt::split::Split;
    let start = std::time::Instant::now();
    let (cfg, tokens) = desk_config(root);
    let opts = PipelineOptions { quiet: true, ..Default::default() };
    run_pipeline(&cfg, &Stage::ALL, &opts)?;
    let elapsed = start.elapsed();
    let wd = Workdir::new(&cfg.paths.workdir);
    let tok = mlm_adapt::tokenizer::resolve(&cfg.tokenizer.spec)?;
    let vocab = MaskVocab::from_tokenizer(&*tok)?;
    let val = mlm_adapt::chunkfile::read_chunks(&wd.chunks(Split::Val))?;
    let best = resolve_backend("best", Some(&wd), vocab.vocab_size)?;
    let init = resolve_backend("init", Some(&wd), vocab.vocab_size)?;
    let cmp = mlm_adapt::eval::compare(&*best, &*init, &val, &cfg.mask, &vocab, &cfg.eval)?;
    let a = mlm_adapt::eval::EvalReport::load(&wd.compare().join("a.json"))?;
    let b = mlm_adapt::eval::EvalReport::load(&wd.compare().join("b.json"))?;
    Ok(DeskRun { tokens, val: cmp, test: (a, b), elapsed })
}

pub fn small_model(seed: u64) -> TinyEncoder {
    TinyEncoder::new(TinyConfig { layers: 1, hidden: 16, heads: 2, ff: 32, init_seed: seed, ..TinyConfig::new(1000, 16) })
        .unwrap()
}

/// Chunks over a 20-word active vocabulary, so the unigram part is learnable.
pub fn narrow_chunks(n: usize, seed: u64) -> Vec<TokenChunk> {
    (0..n)
        .map(|c| {
            let ids = (0..16).map(|i| 5 + (key(&[seed, c as u64, i]) % 20) as u32).collect();
            TokenChunk::from_ids(ids, 0, Origin::new(0, c as u32))
        })
        .collect()
}

/// Per-step training losses of (batch 8, accumulation 4) and (batch 32,
/// accumulation 1) runs from the same initial weights, in full precision.
pub fn accumulation_pair() -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
    use mlm_adapt::train::{train, TrainConfig, TrainControl, TrainData};
    let train_chunks = narrow_chunks(800, 21);
    let val_chunks = narrow_chunks(40, 22);
    let (vocab, policy) = (mask_vocab(), MaskPolicy::default());
    let data = TrainData { train: &train_chunks, val: &val_chunks, policy: &policy, vocab: &vocab };
    let quiet = TrainControl { quiet: true, ..Default::default() };
    let accumulated = TrainConfig {
        per_device_batch: 8,
        accumulation_steps: 4,
        learning_rate: 1e-3,
        mixed_precision: false,
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let single = TrainConfig { per_device_batch: 32, accumulation_steps: 1, ..accumulated.clone() };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o1 = train(&mut small_model(3), data, &accumulated, d1.path(), &quiet).unwrap();
    let o2 = train(&mut small_model(3), data, &single, d2.path(), &quiet).unwrap();
    (o1.step_losses, o2.step_losses)
}

/// Backend whose validation loss at step `t` is driven by `losses[t - 1]`.
/// Its only state is the step counter, which it checkpoints like real weights.
#[derive(Clone)]
struct Scripted {
    losses: Vec<f32>,
    steps: u64,
}

impl Backend for Scripted {
    fn vocab_size(&self) -> usize {
        8
    }

    fn forward(&self, batch: &[MaskedExample]) -> mlm_adapt::Result<PositionLogits> {
        let len = batch[0].input_ids.len();
        let mut out = PositionLogits::zeros(batch.len(), len, 8);
        // a lower score on the label means a higher loss, monotonically
        let score = -self.losses[(self.steps as usize).saturating_sub(1)];
        for (b, ex) in batch.iter().enumerate() {
            for (i, l) in ex.labeled_positions() {
                out.row_mut(b, i)[l as usize] = score;
            }
        }
        Ok(out)
    }
}

impl TrainableBackend for Scripted {
    fn zero_grad(&mut self) {}

    fn accumulate_gradients(&mut self, batch: &[MaskedExample]) -> mlm_adapt::Result<(f64, usize)> {
        Ok((batch.len() as f64, batch.len()))
    }

    fn apply_update(&mut self, _: &OptimizerConfig, _: f32) {
        self.steps += 1;
    }

    fn optimizer_steps(&self) -> u64 {
        self.steps
    }

    fn set_mixed_precision(&mut self, _: bool) {}

    fn save(&self, dir: &Path) -> mlm_adapt::Result<()> {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("steps"), self.steps.to_string()).unwrap();
        Ok(())
    }

    fn restore(&mut self, dir: &Path) -> mlm_adapt::Result<()> {
        self.steps = fs::read_to_string(dir.join("steps")).unwrap().parse().unwrap();
        Ok(())
    }
}

/// Earliest index of the minimum, by a plain scan.
pub fn argmin_earliest(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Trains against an injected loss sequence and returns the selected step.
pub fn selected_step(losses: &[f32]) -> usize {
    use mlm_adapt::train::{train, CheckpointRecord, TrainConfig, TrainControl, TrainData, BEST_FILE};
    let chunks: Vec<TokenChunk> = (0..losses.len() as u32)
        .map(|c| TokenChunk::from_ids(vec![5, 6, 7, 5], 0, Origin::new(0, c)))
        .collect();
    let vocab = MaskVocab::new(8, 0, 2, vec![1, 3, 4]).unwrap();
    let every = MaskPolicy::new(1.0, 0.0, 0.0, 1.0).unwrap();
    let data = TrainData { train: &chunks, val: &chunks[..1], policy: &every, vocab: &vocab };
    let cfg = TrainConfig {
        per_device_batch: 1,
        accumulation_steps: 1,
        epochs: 1,
        eval_interval_steps: Some(1),
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut backend = Scripted { losses: losses.to_vec(), steps: 0 };
    let out = train(&mut backend, data, &cfg, dir.path(), &TrainControl { quiet: true, ..Default::default() }).unwrap();
    let best = out.best.unwrap();
    let written: CheckpointRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(BEST_FILE)).unwrap()).unwrap();
    assert_eq!(written, best);
    assert!(best.path.ends_with(format!("checkpoint-{:06}", best.step)));
    best.step
}

/// Random loss sequences over four values, so ties with the minimum are frequent.
pub fn injected_sequence(case: u64) -> Vec<f32> {
    let n = 2 + (key(&[case, 1]) % 9) as usize;
    (0..n).map(|i| 1.0 + (key(&[case, 2, i as u64]) % 4) as f32 * 0.5).collect()
}
