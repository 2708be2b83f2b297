//! Fine-tuning loop: batching, gradient accumulation, periodic validation,
//! checkpointing and best-checkpoint selection.
//!
//! Data order and masks are functions of `(seed, epoch, step)`, so a run
//! resumed from a checkpoint replays exactly the batches an uninterrupted
//! run would have seen.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::digest_of;
use crate::error::{Error, IoContext, Result};
use crate::keyed::{key, permutation};
use crate::mask::{epoch_seed, mask_chunk, MaskPolicy, MaskVocab, MaskedExample};
use crate::model::{nll, OptimizerConfig, TrainableBackend};
use crate::pack::TokenChunk;

const TAG_SHUFFLE: u64 = 0x5348_5546; // "SHUF"
const TAG_VALIDATION: u64 = 0x5641_4C; // "VAL"

pub const STATE_FILE: &str = "trainer_state.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_FILE: &str = "best.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    LinearDecay,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear_decay" => Ok(Self::LinearDecay),
            other => Err(Error::config(format!("unknown lr schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub per_device_batch: usize,
    pub accumulation_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub mixed_precision: bool,
    /// Optimizer steps between validations; `None` means a tenth of an epoch.
    pub eval_interval_steps: Option<usize>,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            per_device_batch: 32,
            accumulation_steps: 4,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            epochs: 2,
            mixed_precision: true,
            eval_interval_steps: None,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_device_batch == 0 || self.accumulation_steps == 0 || self.epochs == 0 {
            return Err(Error::config("batch size, accumulation steps and epochs must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("invalid weight decay {}", self.weight_decay)));
        }
        if self.eval_interval_steps == Some(0) {
            return Err(Error::config("eval_interval_steps must be at least 1"));
        }
        Ok(())
    }

    /// Flat `key = value` TOML using the field names above.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    /// Examples per optimizer update.
    pub fn effective_batch(&self) -> usize {
        self.per_device_batch * self.accumulation_steps
    }

    pub fn steps_per_epoch(&self, train_chunks: usize) -> usize {
        train_chunks.div_ceil(self.effective_batch())
    }

    pub fn eval_interval(&self, train_chunks: usize) -> usize {
        self.eval_interval_steps
            .unwrap_or_else(|| (self.steps_per_epoch(train_chunks) / 10).max(1))
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::LinearDecay => self.learning_rate * (1.0 - step as f64 / total as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub path: PathBuf,
}

/// Lowest validation loss; the earliest record wins ties.
pub fn select_best(records: &[CheckpointRecord]) -> Option<&CheckpointRecord> {
    records
        .iter()
        .fold(None, |best: Option<&CheckpointRecord>, r| match best {
            Some(b) if b.val_loss <= r.val_loss => Some(b),
            _ => Some(r),
        })
}

/// Everything the trainer needs besides the backend.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [TokenChunk],
    pub val: &'a [TokenChunk],
    pub policy: &'a MaskPolicy,
    pub vocab: &'a MaskVocab,
}

/// Knobs that do not affect the trajectory.
#[derive(Debug, Clone, Default)]
pub struct TrainControl {
    /// Stop (without a final validation) once this many optimizer steps have run.
    pub stop_after_steps: Option<usize>,
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<CheckpointRecord>,
    pub best: Option<CheckpointRecord>,
    pub initial_val_loss: f64,
    /// Mean training loss of each optimizer step run in this invocation, keyed by step.
    pub step_losses: Vec<(usize, f64)>,
    pub steps_done: usize,
    pub total_steps: usize,
    pub completed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    config_digest: String,
    config: TrainConfig,
    step: usize,
    initial_val_loss: f64,
    records: Vec<CheckpointRecord>,
    checkpoint: PathBuf,
}

#[derive(Serialize)]
struct DigestInput<'a> {
    train: &'a TrainConfig,
    policy: &'a MaskPolicy,
    train_chunks: usize,
    val_chunks: usize,
}

pub fn config_digest(cfg: &TrainConfig, data: &TrainData<'_>) -> String {
    digest_of(&DigestInput {
        train: cfg,
        policy: data.policy,
        train_chunks: data.train.len(),
        val_chunks: data.val.len(),
    })
}

/// Validation examples, masked once with a seed fixed for the whole run.
pub fn validation_set(cfg: &TrainConfig, data: &TrainData<'_>) -> Vec<MaskedExample> {
    let seed = key(&[cfg.seed, TAG_VALIDATION]);
    data.val.iter().map(|c| mask_chunk(c, data.policy, data.vocab, seed)).collect()
}

/// Mean NLL over the labeled positions of `examples`, scored in batches.
pub fn mean_nll(backend: &dyn TrainableBackend, examples: &[MaskedExample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for group in examples.chunks(batch.max(1)) {
        let logits = backend.forward(group)?;
        for (b, ex) in group.iter().enumerate() {
            for (i, label) in ex.labeled_positions() {
                total += nll(logits.row(b, i), label);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    Ok(total / count as f64)
}

/// Indices of the training chunks for step `step_in_epoch` of `epoch`, in
/// micro-batches of `per_device_batch`.
fn step_batches<'a>(cfg: &TrainConfig, order: &'a [usize], step_in_epoch: usize) -> Vec<&'a [usize]> {
    let eb = cfg.effective_batch();
    let start = step_in_epoch * eb;
    let end = (start + eb).min(order.len());
    order[start..end].chunks(cfg.per_device_batch).collect()
}

fn epoch_order(cfg: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    permutation(n, key(&[cfg.seed, TAG_SHUFFLE, epoch as u64]))
}

fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("checkpoint-{step:06}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).ctx(|| path.display().to_string())?;
    fs::write(path, text + "\n").ctx(|| format!("writing {}", path.display()))
}

struct Run<'a, 'd> {
    backend: &'a mut dyn TrainableBackend,
    data: TrainData<'d>,
    cfg: TrainConfig,
    out: PathBuf,
    val: Vec<MaskedExample>,
    state: TrainerState,
}

impl Run<'_, '_> {
    fn log_line(&self, rec: &CheckpointRecord, epoch: usize) -> Result<()> {
        let path = self.out.join(LOG_FILE);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .ctx(|| format!("opening {}", path.display()))?;
        let line = serde_json::json!({
            "step": rec.step,
            "epoch": epoch,
            "train_loss": rec.train_loss,
            "val_loss": rec.val_loss,
        });
        writeln!(f, "{line}").ctx(|| format!("writing {}", path.display()))
    }

    fn checkpoint(&mut self, step: usize) -> Result<PathBuf> {
        let dir = checkpoint_dir(&self.out, step);
        self.backend.save(&dir)?;
        self.state.step = step;
        self.state.checkpoint = dir.clone();
        write_json(&self.out.join(STATE_FILE), &self.state)?;
        Ok(dir)
    }

    fn run(&mut self, control: &TrainControl) -> Result<TrainOutcome> {
        let cfg = self.cfg.clone();
        let n = self.data.train.len();
        let per_epoch = cfg.steps_per_epoch(n);
        let total = per_epoch * cfg.epochs;
        let interval = cfg.eval_interval(n);
        let mut step = self.state.step;
        let mut step_losses = Vec::new();
        let (mut window_nll, mut window_count) = (0.0, 0usize);
        let mut order: Option<(usize, Vec<usize>)> = None;

        while step < total {
            if control.stop_after_steps.is_some_and(|s| step >= s) {
                break;
            }
            let epoch = step / per_epoch;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, epoch_order(&cfg, n, epoch)));
            }
            let idx = &order.as_ref().unwrap().1;
            let seed = epoch_seed(cfg.seed, epoch);

            self.backend.zero_grad();
            let (mut sum, mut count) = (0.0, 0usize);
            for micro in step_batches(&cfg, idx, step % per_epoch) {
                let batch: Vec<MaskedExample> = micro
                    .iter()
                    .map(|&i| mask_chunk(&self.data.train[i], self.data.policy, self.data.vocab, seed))
                    .collect();
                let (s, c) = self.backend.accumulate_gradients(&batch)?;
                if !s.is_finite() {
                    self.backend.zero_grad();
                    return Err(Error::NonFiniteLoss {
                        loss: s,
                        step,
                        epoch,
                        origin: batch.first().map(|e| e.origin),
                    });
                }
                sum += s;
                count += c;
            }
            if count > 0 {
                let opt = OptimizerConfig::new(cfg.lr_at(step, total), cfg.weight_decay);
                self.backend.apply_update(&opt, (1.0 / count as f64) as f32);
                step_losses.push((step, sum / count as f64));
            } else {
                self.backend.zero_grad();
            }
            window_nll += sum;
            window_count += count;
            step += 1;

            if step % interval == 0 || step == total {
                let val_loss = mean_nll(&*self.backend, &self.val, cfg.per_device_batch)?;
                if !val_loss.is_finite() {
                    return Err(Error::NonFiniteLoss { loss: val_loss, step, epoch, origin: None });
                }
                let train_loss = if window_count > 0 { window_nll / window_count as f64 } else { f64::NAN };
                (window_nll, window_count) = (0.0, 0);
                let path = checkpoint_dir(&self.out, step);
                let rec = CheckpointRecord { step, train_loss, val_loss, path };
                self.state.records.push(rec.clone());
                self.checkpoint(step)?;
                self.log_line(&rec, epoch)?;
                if !control.quiet {
                    eprintln!("step {step}/{total} epoch {epoch} train_loss {train_loss:.4} val_loss {val_loss:.4}");
                }
            }
        }

        let completed = step >= total;
        let best = select_best(&self.state.records).cloned();
        if completed {
            if let Some(b) = &best {
                write_json(&self.out.join(BEST_FILE), b)?;
            }
        }
        Ok(TrainOutcome {
            records: self.state.records.clone(),
            best,
            initial_val_loss: self.state.initial_val_loss,
            step_losses,
            steps_done: step,
            total_steps: total,
            completed,
        })
    }
}

fn check_data(data: &TrainData<'_>) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::config("training stream is empty"));
    }
    if data.val.is_empty() {
        return Err(Error::config("validation stream is empty"));
    }
    Ok(())
}

/// Fresh run writing checkpoints, `train_log.jsonl` and `trainer_state.json` under `out`.
pub fn train(
    backend: &mut dyn TrainableBackend,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    out: &Path,
    control: &TrainControl,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(&data)?;
    fs::create_dir_all(out).ctx(|| format!("creating {}", out.display()))?;
    let log = out.join(LOG_FILE);
    File::create(&log).ctx(|| format!("creating {}", log.display()))?;
    backend.set_mixed_precision(cfg.mixed_precision);
    let val = validation_set(cfg, &data);
    let initial_val_loss = mean_nll(&*backend, &val, cfg.per_device_batch)?;
    let state = TrainerState {
        config_digest: config_digest(cfg, &data),
        config: cfg.clone(),
        step: 0,
        initial_val_loss,
        records: Vec::new(),
        checkpoint: PathBuf::new(),
    };
    let mut run = Run { backend, data, cfg: cfg.clone(), out: out.to_path_buf(), val, state };
    run.checkpoint(0)?;
    run.run(control)
}

/// Continue the run recorded in `out` from its latest checkpoint.
///
/// Refuses when `cfg` or the data shape differ from the recorded run unless
/// `force` is set.
pub fn resume(
    backend: &mut dyn TrainableBackend,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    out: &Path,
    force: bool,
    control: &TrainControl,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(&data)?;
    let path = out.join(STATE_FILE);
    if !path.exists() {
        return Err(Error::MissingPrerequisite { stage: "train", path });
    }
    let text = fs::read_to_string(&path).ctx(|| format!("reading {}", path.display()))?;
    let mut state: TrainerState = serde_json::from_str(&text).ctx(|| path.display().to_string())?;
    let digest = config_digest(cfg, &data);
    if digest != state.config_digest && !force {
        return Err(Error::config(format!(
            "configuration digest {digest} differs from the checkpointed run ({}); pass --force to resume anyway",
            state.config_digest
        )));
    }
    backend.restore(&state.checkpoint)?;
    backend.set_mixed_precision(cfg.mixed_precision);

    // drop evaluations newer than the checkpoint and rewrite the log to match
    state.records.retain(|r| r.step <= state.step);
    let per_epoch = cfg.steps_per_epoch(data.train.len()).max(1);
    let log = out.join(LOG_FILE);
    let mut f = File::create(&log).ctx(|| format!("creating {}", log.display()))?;
    for r in &state.records {
        let line = serde_json::json!({
            "step": r.step,
            "epoch": (r.step.max(1) - 1) / per_epoch,
            "train_loss": r.train_loss,
            "val_loss": r.val_loss,
        });
        writeln!(f, "{line}").ctx(|| format!("writing {}", log.display()))?;
    }
    state.config_digest = digest;
    state.config = cfg.clone();
    let val = validation_set(cfg, &data);
    let mut run = Run { backend, data, cfg: cfg.clone(), out: out.to_path_buf(), val, state };
    run.run(control)
}

/// Records stored by a finished or interrupted run.
pub fn read_records(out: &Path) -> Result<Vec<CheckpointRecord>> {
    let path = out.join(STATE_FILE);
    let text = fs::read_to_string(&path).ctx(|| format!("reading {}", path.display()))?;
    let state: TrainerState = serde_json::from_str(&text).ctx(|| path.display().to_string())?;
    Ok(state.records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, val_loss: f64) -> CheckpointRecord {
        CheckpointRecord { step, train_loss: 0.0, val_loss, path: PathBuf::new() }
    }

    #[test]
    fn best_is_argmin_with_earliest_tie() {
        let r = vec![rec(1, 2.0), rec(2, 1.5), rec(3, 1.8)];
        assert_eq!(select_best(&r).unwrap().step, 2);
        let r = vec![rec(1, 2.0), rec(2, 1.0), rec(3, 1.0)];
        assert_eq!(select_best(&r).unwrap().step, 2);
        assert!(select_best(&[]).is_none());
    }

    #[test]
    fn schedule_and_interval() {
        let cfg = TrainConfig { lr_schedule: LrSchedule::LinearDecay, ..Default::default() };
        assert_eq!(cfg.lr_at(0, 10), 1e-4);
        assert!((cfg.lr_at(5, 10) - 5e-5).abs() < 1e-18);
        assert_eq!(cfg.steps_per_epoch(1000), 8);
        assert_eq!(cfg.eval_interval(1000), 1);
        assert_eq!(cfg.eval_interval(12_800), 10);
    }

    #[test]
    fn flat_config_file() {
        let cfg = TrainConfig::from_toml("per_device_batch = 8\nlr_schedule = \"linear_decay\"\neval_interval_steps = 3\n").unwrap();
        assert_eq!(cfg.per_device_batch, 8);
        assert_eq!(cfg.accumulation_steps, 4);
        assert_eq!(cfg.lr_schedule, LrSchedule::LinearDecay);
        assert_eq!(cfg.eval_interval_steps, Some(3));
        assert!(TrainConfig::from_toml("batch = 8").is_err());
    }

    #[test]
    fn zero_interval_is_rejected() {
        let cfg = TrainConfig { eval_interval_steps: Some(0), ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn micro_batches_cover_the_step_window() {
        let cfg = TrainConfig { per_device_batch: 3, accumulation_steps: 2, ..Default::default() };
        let order: Vec<usize> = (0..10).collect();
        let b = step_batches(&cfg, &order, 1);
        assert_eq!(b, vec![&[6, 7, 8][..], &[9][..]]);
    }
}
