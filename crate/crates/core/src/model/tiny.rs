//! A small bidirectional transformer encoder with hand-written backprop.
//!
//! Post-layer-norm blocks (attention, then a GELU feed-forward), learned
//! token and position embeddings, and a linear projection to the
//! vocabulary. Padding keys are masked out of attention; there is no causal
//! mask and no dropout, so inference is deterministic.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::mask::MaskedExample;
use crate::model::kernels::{
    add_bias, col_sum_into, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, softmax_rows, View, ViewMut,
};
use crate::model::optim::{AdamW, OptimizerConfig};
use crate::model::tensorfile::{self, Tensor};
use crate::model::{labels_in_range, nll, Backend, PositionLogits, TrainableBackend};

pub const CONFIG_FILE: &str = "model.toml";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const ARCHITECTURE: &str = "tiny-encoder-v2";

const MASKED_SCORE: f32 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub architecture: String,
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub init_seed: u64,
    #[serde(default)]
    pub tokenizer_digest: String,
}

impl TinyConfig {
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        Self {
            architecture: ARCHITECTURE.to_string(),
            vocab_size,
            max_len,
            layers: 2,
            hidden: 128,
            heads: 4,
            ff: 512,
            init_seed: 0,
            tokenizer_digest: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture != ARCHITECTURE {
            return Err(Error::config(format!("unknown architecture `{}`", self.architecture)));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.hidden == 0 || self.heads == 0 || self.ff == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    range: Range<usize>,
}

#[derive(Debug, Clone)]
struct LayerSlots {
    wq: Range<usize>,
    bq: Range<usize>,
    wk: Range<usize>,
    wv: Range<usize>,
    bv: Range<usize>,
    wo: Range<usize>,
    bo: Range<usize>,
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    slots: Vec<Slot>,
    tok: Range<usize>,
    pos: Range<usize>,
    emb_g: Range<usize>,
    emb_b: Range<usize>,
    layers: Vec<LayerSlots>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &TinyConfig) -> Self {
        let mut slots = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let range = total..total + n;
            total += n;
            slots.push(Slot { name, shape, range: range.clone() });
            range
        };
        let (v, h, f) = (cfg.vocab_size, cfg.hidden, cfg.ff);
        let tok = add("tok_emb".into(), vec![v, h]);
        let pos = add("pos_emb".into(), vec![cfg.max_len, h]);
        let emb_g = add("emb_ln.gamma".into(), vec![h]);
        let emb_b = add("emb_ln.beta".into(), vec![h]);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut n = |s: &str, shape: Vec<usize>| add(format!("layer{l}.{s}"), shape);
                LayerSlots {
                    wq: n("attn.wq", vec![h, h]),
                    bq: n("attn.bq", vec![h]),
                    wk: n("attn.wk", vec![h, h]),
                    wv: n("attn.wv", vec![h, h]),
                    bv: n("attn.bv", vec![h]),
                    wo: n("attn.wo", vec![h, h]),
                    bo: n("attn.bo", vec![h]),
                    ln1_g: n("ln1.gamma", vec![h]),
                    ln1_b: n("ln1.beta", vec![h]),
                    w1: n("ff.w1", vec![h, f]),
                    b1: n("ff.b1", vec![f]),
                    w2: n("ff.w2", vec![f, h]),
                    b2: n("ff.b2", vec![h]),
                    ln2_g: n("ln2.gamma", vec![h]),
                    ln2_b: n("ln2.beta", vec![h]),
                }
            })
            .collect();
        let out_w = add("out.w".into(), vec![h, v]);
        let out_b = add("out.b".into(), vec![v]);
        Self { slots, tok, pos, emb_g, emb_b, layers, out_w, out_b, total }
    }
}

/// Disjoint mutable sub-slices `a` and `b` of `buf`, with `a` before `b`.
fn pair_mut<'a>(buf: &'a mut [f32], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f32], &'a mut [f32]) {
    assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

struct LayerCache {
    x: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    ctx: Vec<f32>,
    ln1: (Vec<f32>, Vec<f32>),
    h1: Vec<f32>,
    u: Vec<f32>,
    g: Vec<f32>,
    ln2: (Vec<f32>, Vec<f32>),
}

struct Cache {
    len: usize,
    emb_ln: (Vec<f32>, Vec<f32>),
    layers: Vec<LayerCache>,
    out: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct TinyEncoder {
    cfg: TinyConfig,
    layout: Layout,
    params: Vec<f32>,
    grads: Vec<f32>,
    opt: AdamW,
    mixed_precision: bool,
}

impl TinyEncoder {
    /// Fresh weights drawn from `cfg.init_seed`.
    pub fn new(cfg: TinyConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        for slot in &layout.slots {
            let p = &mut params[slot.range.clone()];
            if slot.name.ends_with(".gamma") {
                p.fill(1.0);
            } else if slot.shape.len() == 2 {
                let bound = if slot.name.ends_with("_emb") {
                    0.1
                } else {
                    (6.0 / (slot.shape[0] + slot.shape[1]) as f32).sqrt()
                };
                for x in p.iter_mut() {
                    *x = rng.gen_range(-bound..bound);
                }
            }
        }
        Ok(Self::assemble(cfg, layout, params))
    }

    fn assemble(cfg: TinyConfig, layout: Layout, params: Vec<f32>) -> Self {
        let n = params.len();
        Self {
            cfg,
            layout,
            params,
            grads: vec![0.0; n],
            opt: AdamW::new(n),
            mixed_precision: false,
        }
    }

    pub fn config(&self) -> &TinyConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f32] {
        &self.grads
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn mixed_precision(&self) -> bool {
        self.mixed_precision
    }

    /// `(name, range)` of every parameter tensor, in storage order.
    pub fn tensor_ranges(&self) -> Vec<(String, Range<usize>)> {
        self.layout.slots.iter().map(|s| (s.name.clone(), s.range.clone())).collect()
    }

    fn p(&self, r: &Range<usize>) -> &[f32] {
        &self.params[r.clone()]
    }

    fn encode(&self, ids: &[u32], attention: &[bool]) -> Cache {
        let (h, nh, f) = (self.cfg.hidden, self.cfg.heads, self.cfg.ff);
        let d = h / nh;
        let len = ids.len();
        let half = self.mixed_precision;
        let scale = 1.0 / (d as f32).sqrt();
        let tok = self.p(&self.layout.tok);
        let pos = self.p(&self.layout.pos);

        let mut e = vec![0.0f32; len * h];
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut e[i * h..(i + 1) * h];
            let t = &tok[id as usize * h..(id as usize + 1) * h];
            let p = &pos[i * h..(i + 1) * h];
            for c in 0..h {
                row[c] = t[c] + p[c];
            }
        }
        let mut x = vec![0.0f32; len * h];
        let emb_ln = layer_norm(&e, h, self.p(&self.layout.emb_g), self.p(&self.layout.emb_b), &mut x);

        let mut layers = Vec::with_capacity(self.cfg.layers);
        for ls in &self.layout.layers {
            let proj = |w: &Range<usize>, b: Option<&Range<usize>>| {
                let mut y = vec![0.0f32; len * h];
                gemm(1.0, View::new(&x, len, h), View::new(self.p(w), h, h), 0.0, ViewMut::new(&mut y, len, h), half);
                if let Some(b) = b {
                    add_bias(&mut y, self.p(b));
                }
                y
            };
            // no key bias: it shifts every score in a row equally
            let q = proj(&ls.wq, Some(&ls.bq));
            let k = proj(&ls.wk, None);
            let v = proj(&ls.wv, Some(&ls.bv));

            let mut probs = vec![0.0f32; nh * len * len];
            let mut ctx = vec![0.0f32; len * h];
            for head in 0..nh {
                let s = &mut probs[head * len * len..(head + 1) * len * len];
                gemm(
                    scale,
                    View::columns(&q, len, h, head * d, d),
                    View::columns(&k, len, h, head * d, d).t(),
                    0.0,
                    ViewMut::new(s, len, len),
                    half,
                );
                for row in s.chunks_exact_mut(len) {
                    for (j, v) in row.iter_mut().enumerate() {
                        if !attention[j] {
                            *v = MASKED_SCORE;
                        }
                    }
                }
                softmax_rows(s, len);
                gemm(
                    1.0,
                    View::new(s, len, len),
                    View::columns(&v, len, h, head * d, d),
                    0.0,
                    ViewMut::columns(&mut ctx, len, h, head * d, d),
                    half,
                );
            }

            let mut r1 = x.clone();
            gemm(1.0, View::new(&ctx, len, h), View::new(self.p(&ls.wo), h, h), 1.0, ViewMut::new(&mut r1, len, h), half);
            add_bias(&mut r1, self.p(&ls.bo));
            let mut h1 = vec![0.0f32; len * h];
            let ln1 = layer_norm(&r1, h, self.p(&ls.ln1_g), self.p(&ls.ln1_b), &mut h1);

            let mut u = vec![0.0f32; len * f];
            gemm(1.0, View::new(&h1, len, h), View::new(self.p(&ls.w1), h, f), 0.0, ViewMut::new(&mut u, len, f), half);
            add_bias(&mut u, self.p(&ls.b1));
            let g: Vec<f32> = u.iter().map(|&z| gelu(z)).collect();
            let mut r2 = h1.clone();
            gemm(1.0, View::new(&g, len, f), View::new(self.p(&ls.w2), f, h), 1.0, ViewMut::new(&mut r2, len, h), half);
            add_bias(&mut r2, self.p(&ls.b2));
            let mut out = vec![0.0f32; len * h];
            let ln2 = layer_norm(&r2, h, self.p(&ls.ln2_g), self.p(&ls.ln2_b), &mut out);

            let input = std::mem::replace(&mut x, out);
            layers.push(LayerCache { x: input, q, k, v, probs, ctx, ln1, h1, u, g, ln2 });
        }
        Cache { len, emb_ln, layers, out: x }
    }

    /// Logits for the given rows of the final hidden states.
    fn project(&self, out: &[f32], rows: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let (h, v) = (self.cfg.hidden, self.cfg.vocab_size);
        let mut sel = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            sel.extend_from_slice(&out[r * h..(r + 1) * h]);
        }
        let mut logits = vec![0.0f32; rows.len() * v];
        gemm(
            1.0,
            View::new(&sel, rows.len(), h),
            View::new(self.p(&self.layout.out_w), h, v),
            0.0,
            ViewMut::new(&mut logits, rows.len(), v),
            self.mixed_precision,
        );
        add_bias(&mut logits, self.p(&self.layout.out_b));
        (sel, logits)
    }

    /// Summed NLL over labeled positions of one example and its full gradient.
    fn example_gradient(&self, ex: &MaskedExample) -> (f64, usize, Vec<f32>) {
        let mut grads = vec![0.0f32; self.params.len()];
        let rows: Vec<usize> = ex.labeled_positions().map(|(i, _)| i).collect();
        if rows.is_empty() {
            return (0.0, 0, grads);
        }
        let (h, nh, f, vocab) = (self.cfg.hidden, self.cfg.heads, self.cfg.ff, self.cfg.vocab_size);
        let d = h / nh;
        let half = self.mixed_precision;
        let scale = 1.0 / (d as f32).sqrt();
        let cache = self.encode(&ex.input_ids, &ex.attention);
        let len = cache.len;
        let (sel, logits) = self.project(&cache.out, &rows);

        let mut total = 0.0f64;
        let mut dlogits = logits.clone();
        for (r, &i) in rows.iter().enumerate() {
            let label = ex.labels[i] as usize;
            total += nll(&logits[r * vocab..(r + 1) * vocab], label as u32);
            let dl = &mut dlogits[r * vocab..(r + 1) * vocab];
            softmax_rows(dl, vocab);
            dl[label] -= 1.0;
        }

        let l = &self.layout;
        gemm(
            1.0,
            View::new(&sel, rows.len(), h).t(),
            View::new(&dlogits, rows.len(), vocab),
            1.0,
            ViewMut::new(&mut grads[l.out_w.clone()], h, vocab),
            half,
        );
        col_sum_into(&dlogits, &mut grads[l.out_b.clone()]);
        let mut dsel = vec![0.0f32; rows.len() * h];
        gemm(
            1.0,
            View::new(&dlogits, rows.len(), vocab),
            View::new(self.p(&l.out_w), h, vocab).t(),
            0.0,
            ViewMut::new(&mut dsel, rows.len(), h),
            half,
        );
        let mut dout = vec![0.0f32; len * h];
        for (r, &i) in rows.iter().enumerate() {
            dout[i * h..(i + 1) * h].copy_from_slice(&dsel[r * h..(r + 1) * h]);
        }

        for (ls, lc) in l.layers.iter().zip(&cache.layers).rev() {
            // second sublayer: out = LN2(h1 + ff(h1))
            let mut dr2 = vec![0.0f32; len * h];
            {
                let (dg, db) = pair_mut(&mut grads, &ls.ln2_g, &ls.ln2_b);
                layer_norm_backward(&dout, &lc.ln2.0, &lc.ln2.1, self.p(&ls.ln2_g), &mut dr2, dg, db);
            }
            let mut dh1 = dr2.clone();
            gemm(1.0, View::new(&lc.g, len, f).t(), View::new(&dr2, len, h), 1.0, ViewMut::new(&mut grads[ls.w2.clone()], f, h), half);
            col_sum_into(&dr2, &mut grads[ls.b2.clone()]);
            let mut du = vec![0.0f32; len * f];
            gemm(1.0, View::new(&dr2, len, h), View::new(self.p(&ls.w2), f, h).t(), 0.0, ViewMut::new(&mut du, len, f), half);
            for (g, &z) in du.iter_mut().zip(&lc.u) {
                *g *= gelu_grad(z);
            }
            gemm(1.0, View::new(&lc.h1, len, h).t(), View::new(&du, len, f), 1.0, ViewMut::new(&mut grads[ls.w1.clone()], h, f), half);
            col_sum_into(&du, &mut grads[ls.b1.clone()]);
            gemm(1.0, View::new(&du, len, f), View::new(self.p(&ls.w1), h, f).t(), 1.0, ViewMut::new(&mut dh1, len, h), half);

            // first sublayer: h1 = LN1(x + attn(x))
            let mut dr1 = vec![0.0f32; len * h];
            {
                let (dg, db) = pair_mut(&mut grads, &ls.ln1_g, &ls.ln1_b);
                layer_norm_backward(&dh1, &lc.ln1.0, &lc.ln1.1, self.p(&ls.ln1_g), &mut dr1, dg, db);
            }
            gemm(1.0, View::new(&lc.ctx, len, h).t(), View::new(&dr1, len, h), 1.0, ViewMut::new(&mut grads[ls.wo.clone()], h, h), half);
            col_sum_into(&dr1, &mut grads[ls.bo.clone()]);
            let mut dctx = vec![0.0f32; len * h];
            gemm(1.0, View::new(&dr1, len, h), View::new(self.p(&ls.wo), h, h).t(), 0.0, ViewMut::new(&mut dctx, len, h), half);

            let mut dq = vec![0.0f32; len * h];
            let mut dk = vec![0.0f32; len * h];
            let mut dv = vec![0.0f32; len * h];
            let mut ds = vec![0.0f32; len * len];
            for head in 0..nh {
                let p = &lc.probs[head * len * len..(head + 1) * len * len];
                gemm(
                    1.0,
                    View::columns(&dctx, len, h, head * d, d),
                    View::columns(&lc.v, len, h, head * d, d).t(),
                    0.0,
                    ViewMut::new(&mut ds, len, len),
                    half,
                );
                gemm(
                    1.0,
                    View::new(p, len, len).t(),
                    View::columns(&dctx, len, h, head * d, d),
                    0.0,
                    ViewMut::columns(&mut dv, len, h, head * d, d),
                    half,
                );
                for (prow, srow) in p.chunks_exact(len).zip(ds.chunks_exact_mut(len)) {
                    let dot: f32 = prow.iter().zip(srow.iter()).map(|(a, b)| a * b).sum();
                    for (j, (s, &pj)) in srow.iter_mut().zip(prow).enumerate() {
                        *s = if ex.attention[j] { pj * (*s - dot) * scale } else { 0.0 };
                    }
                }
                gemm(
                    1.0,
                    View::new(&ds, len, len),
                    View::columns(&lc.k, len, h, head * d, d),
                    0.0,
                    ViewMut::columns(&mut dq, len, h, head * d, d),
                    half,
                );
                gemm(
                    1.0,
                    View::new(&ds, len, len).t(),
                    View::columns(&lc.q, len, h, head * d, d),
                    0.0,
                    ViewMut::columns(&mut dk, len, h, head * d, d),
                    half,
                );
            }

            let mut dx = dr1;
            for (dy, w, b) in [(&dq, &ls.wq, Some(&ls.bq)), (&dk, &ls.wk, None), (&dv, &ls.wv, Some(&ls.bv))] {
                gemm(1.0, View::new(&lc.x, len, h).t(), View::new(dy, len, h), 1.0, ViewMut::new(&mut grads[w.clone()], h, h), half);
                if let Some(b) = b {
                    col_sum_into(dy, &mut grads[b.clone()]);
                }
                gemm(1.0, View::new(dy, len, h), View::new(self.p(w), h, h).t(), 1.0, ViewMut::new(&mut dx, len, h), half);
            }
            dout = dx;
        }

        let mut de = vec![0.0f32; len * h];
        {
            let (dg, db) = pair_mut(&mut grads, &l.emb_g, &l.emb_b);
            layer_norm_backward(&dout, &cache.emb_ln.0, &cache.emb_ln.1, self.p(&l.emb_g), &mut de, dg, db);
        }
        for (i, &id) in ex.input_ids.iter().enumerate() {
            let src = &de[i * h..(i + 1) * h];
            let t0 = l.tok.start + id as usize * h;
            for (g, s) in grads[t0..t0 + h].iter_mut().zip(src) {
                *g += s;
            }
            let p0 = l.pos.start + i * h;
            for (g, s) in grads[p0..p0 + h].iter_mut().zip(src) {
                *g += s;
            }
        }
        (total, rows.len(), grads)
    }

    fn check_batch(&self, batch: &[MaskedExample]) -> Result<()> {
        labels_in_range(batch, self.cfg.vocab_size)?;
        for ex in batch {
            if ex.input_ids.len() > self.cfg.max_len {
                return Err(Error::config(format!(
                    "chunk {:?} has {} positions, model max_len is {}",
                    ex.origin,
                    ex.input_ids.len(),
                    self.cfg.max_len
                )));
            }
        }
        Ok(())
    }

    /// Mean NLL over labeled positions through the training path (no gradient).
    pub fn mean_loss(&self, batch: &[MaskedExample]) -> Result<f64> {
        self.check_batch(batch)?;
        let per: Vec<(f64, usize)> = batch
            .par_iter()
            .map(|ex| {
                let rows: Vec<usize> = ex.labeled_positions().map(|(i, _)| i).collect();
                if rows.is_empty() {
                    return (0.0, 0);
                }
                let cache = self.encode(&ex.input_ids, &ex.attention);
                let (_, logits) = self.project(&cache.out, &rows);
                let v = self.cfg.vocab_size;
                let s = rows
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| nll(&logits[r * v..(r + 1) * v], ex.labels[i]))
                    .sum();
                (s, rows.len())
            })
            .collect();
        let (sum, n) = per.iter().fold((0.0, 0), |(s, n), &(a, b)| (s + a, n + b));
        if n == 0 {
            return Err(Error::NoSupervisedPositions);
        }
        Ok(sum / n as f64)
    }

    fn tensors(&self, data: &[f32], prefix: &str) -> Vec<Tensor> {
        self.layout
            .slots
            .iter()
            .map(|s| Tensor {
                name: format!("{prefix}{}", s.name),
                shape: s.shape.clone(),
                data: data[s.range.clone()].to_vec(),
            })
            .collect()
    }

    fn gather(layout: &Layout, tensors: Vec<Tensor>, prefix: &str) -> Result<Vec<f32>> {
        let mut by_name: std::collections::HashMap<String, Tensor> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut flat = vec![0.0f32; layout.total];
        for slot in &layout.slots {
            let name = format!("{prefix}{}", slot.name);
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::checkpoint(&name, "missing from checkpoint"))?;
            if t.shape != slot.shape {
                return Err(Error::checkpoint(
                    &name,
                    format!("shape {:?} does not match expected {:?}", t.shape, slot.shape),
                ));
            }
            flat[slot.range.clone()].copy_from_slice(&t.data);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::checkpoint(extra, "not part of this architecture"));
        }
        Ok(flat)
    }

    pub fn read_config(dir: &Path) -> Result<TinyConfig> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).ctx(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Error::checkpoint("config", format!("{}: {e}", path.display())))
    }

    /// Load weights from a checkpoint directory. With `expected_vocab`, a
    /// vocabulary mismatch is refused before any tensor is read.
    pub fn load(dir: &Path, expected_vocab: Option<usize>) -> Result<Self> {
        let cfg = Self::read_config(dir)?;
        cfg.validate()?;
        if let Some(v) = expected_vocab {
            if v != cfg.vocab_size {
                return Err(Error::checkpoint(
                    "tok_emb",
                    format!("checkpoint vocab_size {} but tokenizer has {v}", cfg.vocab_size),
                ));
            }
        }
        let layout = Layout::new(&cfg);
        let (tensors, _) = tensorfile::read(&dir.join(WEIGHTS_FILE))?;
        let params = Self::gather(&layout, tensors, "")?;
        Ok(Self::assemble(cfg, layout, params))
    }

    pub fn save_weights(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        let text = toml::to_string(&self.cfg).map_err(|e| Error::checkpoint("config", e.to_string()))?;
        fs::write(dir.join(CONFIG_FILE), text).ctx(|| format!("writing {}", dir.display()))?;
        tensorfile::write(&dir.join(WEIGHTS_FILE), &self.tensors(&self.params, ""), 0)
    }

    /// Loss at full and at mixed precision on one batch; weights untouched.
    pub fn precision_gap(&self, batch: &[MaskedExample]) -> Result<super::PrecisionReport> {
        let mut probe = self.clone();
        probe.mixed_precision = false;
        let full = probe.mean_loss(batch)?;
        probe.mixed_precision = true;
        let mixed = probe.mean_loss(batch)?;
        Ok(super::PrecisionReport { full, mixed })
    }
}

impl Backend for TinyEncoder {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn forward(&self, batch: &[MaskedExample]) -> Result<PositionLogits> {
        self.check_batch(batch)?;
        let seq_len = batch.first().map_or(0, |e| e.input_ids.len());
        if batch.iter().any(|e| e.input_ids.len() != seq_len) {
            return Err(Error::config("examples in a batch must share a length"));
        }
        let v = self.cfg.vocab_size;
        let rows: Vec<usize> = (0..seq_len).collect();
        let per: Vec<Vec<f32>> = batch
            .par_iter()
            .map(|ex| {
                let cache = self.encode(&ex.input_ids, &ex.attention);
                self.project(&cache.out, &rows).1
            })
            .collect();
        let mut out = PositionLogits::zeros(batch.len(), seq_len, v);
        for (b, logits) in per.into_iter().enumerate() {
            out.data[b * seq_len * v..(b + 1) * seq_len * v].copy_from_slice(&logits);
        }
        Ok(out)
    }
}

impl TrainableBackend for TinyEncoder {
    fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    fn accumulate_gradients(&mut self, batch: &[MaskedExample]) -> Result<(f64, usize)> {
        self.check_batch(batch)?;
        let per: Vec<(f64, usize, Vec<f32>)> = batch.par_iter().map(|ex| self.example_gradient(ex)).collect();
        let mut sum = 0.0;
        let mut count = 0;
        for (s, n, g) in per {
            sum += s;
            count += n;
            if n > 0 {
                for (acc, x) in self.grads.iter_mut().zip(&g) {
                    *acc += x;
                }
            }
        }
        Ok((sum, count))
    }

    fn apply_update(&mut self, opt: &OptimizerConfig, grad_scale: f32) {
        self.opt.update(&mut self.params, &self.grads, opt, grad_scale);
        self.grads.fill(0.0);
    }

    fn optimizer_steps(&self) -> u64 {
        self.opt.step
    }

    fn set_mixed_precision(&mut self, on: bool) {
        self.mixed_precision = on;
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.save_weights(dir)?;
        let mut moments = self.tensors(&self.opt.m, "m/");
        moments.extend(self.tensors(&self.opt.v, "v/"));
        tensorfile::write(&dir.join(OPTIMIZER_FILE), &moments, self.opt.step)
    }

    fn restore(&mut self, dir: &Path) -> Result<()> {
        let cfg = Self::read_config(dir)?;
        // the init seed only matters before the first checkpoint
        let same = TinyConfig { init_seed: self.cfg.init_seed, ..cfg.clone() };
        if same != self.cfg {
            return Err(Error::checkpoint(
                "config",
                format!("checkpoint architecture {cfg:?} differs from the running model"),
            ));
        }
        let (weights, _) = tensorfile::read(&dir.join(WEIGHTS_FILE))?;
        let params = Self::gather(&self.layout, weights, "")?;
        let (moments, step) = tensorfile::read(&dir.join(OPTIMIZER_FILE))?;
        let (m_t, v_t): (Vec<Tensor>, Vec<Tensor>) = moments.into_iter().partition(|t| t.name.starts_with("m/"));
        let m = Self::gather(&self.layout, m_t, "m/")?;
        let v = Self::gather(&self.layout, v_t, "v/")?;
        self.params = params;
        self.cfg.init_seed = cfg.init_seed;
        self.opt = AdamW { m, v, step };
        self.grads.fill(0.0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::IGNORE;
    use crate::model::{loss, train_step};
    use crate::Origin;

    fn small_cfg() -> TinyConfig {
        TinyConfig { layers: 2, hidden: 16, heads: 4, ff: 32, init_seed: 3, ..TinyConfig::new(20, 8) }
    }

    fn batch() -> Vec<MaskedExample> {
        vec![
            MaskedExample::new(vec![5, 2, 7, 8, 2, 9, 0, 0], vec![IGNORE, 6, IGNORE, IGNORE, 11, IGNORE, IGNORE, IGNORE], 0, Origin::new(0, 0)),
            MaskedExample::new(vec![12, 13, 2, 15, 16, 17, 18, 19], vec![IGNORE, IGNORE, 14, IGNORE, IGNORE, 17, IGNORE, IGNORE], 0, Origin::new(0, 1)),
        ]
    }

    #[test]
    fn training_path_matches_forward_loss() {
        let m = TinyEncoder::new(small_cfg()).unwrap();
        let b = batch();
        let via_forward = loss(&m.forward(&b).unwrap(), &b).unwrap();
        let via_train = m.mean_loss(&b).unwrap();
        assert!((via_forward - via_train).abs() < 1e-5, "{via_forward} vs {via_train}");
    }

    #[test]
    fn forward_is_deterministic() {
        let m = TinyEncoder::new(small_cfg()).unwrap();
        let b = batch();
        assert_eq!(m.forward(&b).unwrap(), m.forward(&b).unwrap());
    }

    #[test]
    fn padding_does_not_leak_into_real_positions() {
        let m = TinyEncoder::new(small_cfg()).unwrap();
        let a = MaskedExample::new(vec![5, 6, 7, 0], vec![IGNORE; 4], 0, Origin::new(0, 0));
        let mut b = a.clone();
        // change a padded input without changing attention: outputs at real positions must not move
        b.input_ids[3] = 9;
        b.attention[3] = false;
        let la = m.forward(&[a]).unwrap();
        let lb = m.forward(&[b]).unwrap();
        for i in 0..3 {
            assert_eq!(la.row(0, i), lb.row(0, i));
        }
    }

    #[test]
    fn memorizes_a_repeated_batch() {
        let mut m = TinyEncoder::new(small_cfg()).unwrap();
        let b = batch();
        let opt = OptimizerConfig::new(1e-2, 0.01);
        let first = train_step(&mut m, &b, &opt).unwrap();
        let mut last = first;
        for _ in 1..100 {
            last = train_step(&mut m, &b, &opt).unwrap();
        }
        assert!(last < first * 0.5, "{first} -> {last}");
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut m = TinyEncoder::new(small_cfg()).unwrap();
        let before = m.params().to_vec();
        train_step(&mut m, &batch(), &OptimizerConfig::new(0.0, 0.01)).unwrap();
        assert_eq!(m.params(), &before[..]);
        assert_eq!(m.optimizer().step, 1);
    }

    #[test]
    fn micro_batches_sum_to_the_full_batch_gradient() {
        let mut a = TinyEncoder::new(small_cfg()).unwrap();
        let mut b = a.clone();
        let bt = batch();
        a.accumulate_gradients(&bt).unwrap();
        b.accumulate_gradients(&bt[..1]).unwrap();
        b.accumulate_gradients(&bt[1..]).unwrap();
        assert_eq!(a.grads(), b.grads());
    }

    #[test]
    fn mixed_precision_stays_close() {
        let m = TinyEncoder::new(small_cfg()).unwrap();
        let gap = m.precision_gap(&batch()).unwrap();
        assert!(gap.full != gap.mixed);
        assert!(gap.relative_gap() < 1e-2, "{gap:?}");
    }
}
