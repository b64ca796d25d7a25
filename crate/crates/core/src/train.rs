//! Joint training of encoder and decoder on next-token cross-entropy.
//!
//! With an output directory, a run writes
//!
//! * `model.ckpt`: weights of the epoch with the lowest validation loss,
//! * `last.ckpt`: current weights plus optimizer state, for resuming,
//! * `metrics.jsonl`: one record per step and one per validation pass.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eqgen::Instance;
use crate::model::{Checkpoint, Model, ModelError};
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Graph, LrSchedule, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Linear warmup length as a fraction of all steps.
    pub warmup_fraction: f64,
    /// Final learning rate relative to `lr`.
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps in total (for smoke runs).
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            warmup_fraction: 0.05,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, corpus: usize) -> u64 {
        corpus.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn schedule(&self, corpus: usize) -> LrSchedule {
        let total = self.steps_per_epoch(corpus) * self.epochs as u64;
        let total = self.max_steps.map_or(total, |m| m.min(total));
        LrSchedule {
            base: self.lr,
            warmup: (self.warmup_fraction * total as f64).round() as u64,
            total,
            min_ratio: self.min_lr_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation loss of the weights before the first step.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: u64,
}

/// State carried in `last.ckpt`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    train: TrainConfig,
    report: TrainReport,
    adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct MetricRecord {
    step: u64,
    epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_loss: Option<f64>,
}

pub const BEST_CHECKPOINT: &str = "model.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// Where and whether to persist a run.
#[derive(Debug, Clone, Default)]
pub struct RunFiles {
    pub dir: Option<PathBuf>,
    /// Continue from `dir/last.ckpt` when it exists.
    pub resume: bool,
}

struct Metrics {
    out: Option<(PathBuf, BufWriter<File>)>,
}

impl Metrics {
    fn open(dir: Option<&Path>, append: bool) -> Result<Metrics, ModelError> {
        let Some(dir) = dir else {
            return Ok(Metrics { out: None });
        };
        let path = dir.join(METRICS_LOG);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|source| ModelError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Metrics {
            out: Some((path, BufWriter::new(file))),
        })
    }

    fn log(&mut self, rec: &MetricRecord) -> Result<(), ModelError> {
        if let Some((path, w)) = &mut self.out {
            let line = serde_json::to_string(rec).expect("metrics serialize");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| ModelError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(())
    }
}

/// Drops log records written after the checkpoint being resumed from.
fn trim_metrics(path: &Path, steps: u64) -> Result<(), ModelError> {
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io(e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| serde_json::from_str::<MetricRecord>(l).is_ok_and(|r| r.step <= steps))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept).map_err(io)
}

/// Checks that every instance fits the model before any work is done.
pub fn validate_corpus(
    model: &Model,
    instances: &[Instance],
    what: &str,
) -> Result<(), ModelError> {
    if instances.is_empty() {
        return Err(NnError::Invalid(format!("{what} corpus is empty")).into());
    }
    for (i, inst) in instances.iter().enumerate() {
        let wrap = |e: ModelError| NnError::Invalid(format!("{what} instance {i}: {e}"));
        model.point_batch(&[inst]).map_err(wrap)?;
        model.token_batch(&[inst.skeleton.as_str()]).map_err(wrap)?;
    }
    Ok(())
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64);
    rng
}

fn dropout_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + 1);
    rng
}

/// Batches for one epoch. Instances are shuffled, sorted by skeleton length
/// inside windows of [`BUCKET_BATCHES`] batches so that padding stays short,
/// and the resulting batches are shuffled again.
pub fn batch_order<R: rand::Rng>(
    lens: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(lens.len().div_ceil(batch_size));
    for window in order.chunks_mut(batch_size * BUCKET_BATCHES) {
        window.sort_by_key(|&i| lens[i]);
        batches.extend(window.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

pub const BUCKET_BATCHES: usize = 8;

/// Trains `model` in place and leaves it holding the best-validation weights.
/// `progress` is called after every step with `(step, epoch, train_loss)`.
pub fn train(
    model: &mut Model,
    train_set: &[Instance],
    val_set: &[Instance],
    cfg: &TrainConfig,
    files: &RunFiles,
    mut progress: impl FnMut(u64, usize, f64),
) -> Result<TrainReport, ModelError> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(NnError::Invalid("batch size and epoch count must be positive".into()).into());
    }
    validate_corpus(model, train_set, "training")?;
    validate_corpus(model, val_set, "validation")?;
    let dir = files.dir.as_deref();
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|source| ModelError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }

    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &model.store);
    let mut best = model.store.clone();
    let last_path = dir.map(|d| d.join(LAST_CHECKPOINT));
    let resumed = match &last_path {
        Some(p) if files.resume && p.exists() => Some(restore(model, &mut adam, &mut best, p)?),
        _ => None,
    };
    if let (Some(dir), Some(r)) = (dir, &resumed) {
        trim_metrics(&dir.join(METRICS_LOG), r.steps)?;
    }
    let mut metrics = Metrics::open(dir, resumed.is_some())?;
    let mut report = match resumed {
        Some(r) => r,
        None => {
            let initial = model.evaluate(val_set, cfg.batch_size)?;
            metrics.log(&MetricRecord {
                step: 0,
                epoch: 0,
                lr: None,
                train_loss: None,
                val_loss: Some(initial),
            })?;
            TrainReport {
                initial_val_loss: initial,
                epochs: Vec::new(),
                best_epoch: 0,
                best_val_loss: initial,
                steps: 0,
            }
        }
    };

    let schedule = cfg.schedule(train_set.len());
    let limit = cfg.max_steps.unwrap_or(u64::MAX);
    for epoch in report.epochs.len() + 1..=cfg.epochs {
        if report.steps >= limit {
            break;
        }
        let lens: Vec<usize> = train_set.iter().map(|i| i.skeleton.len()).collect();
        let order = batch_order(&lens, cfg.batch_size, &mut shuffle_rng(cfg.seed, epoch));
        let mut drop_rng = dropout_rng(cfg.seed, epoch);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in &order {
            if report.steps >= limit {
                break;
            }
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let drop: Option<&mut dyn rand::RngCore> = if model.config.dropout > 0.0 {
                Some(&mut drop_rng)
            } else {
                None
            };
            let loss = model.loss(&mut g, &batch, drop)?;
            let value = g.value(loss).data()[0];
            let mut grads = g.backward(loss, &model.store)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let lr = schedule.at(report.steps);
            adam.update(&mut model.store, &grads, lr)?;
            report.steps += 1;
            loss_sum += value;
            batches += 1;
            metrics.log(&MetricRecord {
                step: report.steps,
                epoch,
                lr: Some(lr),
                train_loss: Some(value),
                val_loss: None,
            })?;
            progress(report.steps, epoch, value);
        }
        let val_loss = model.evaluate(val_set, cfg.batch_size)?;
        metrics.log(&MetricRecord {
            step: report.steps,
            epoch,
            lr: None,
            train_loss: None,
            val_loss: Some(val_loss),
        })?;
        report.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss,
        });
        if !val_loss.is_finite() {
            return Err(ModelError::Diverged {
                epoch,
                loss: val_loss,
            });
        }
        if val_loss < report.best_val_loss || report.best_epoch == 0 {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best.copy_values_from(&model.store)?;
            if let Some(dir) = dir {
                let mut ckpt = model.to_checkpoint();
                ckpt.training = Some(
                    serde_json::json!({ "epoch": epoch, "val_loss": val_loss, "steps": report.steps }),
                );
                ckpt.write(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if let Some(p) = &last_path {
            save_resume(model, &adam, &best, cfg, &report, p)?;
        }
    }
    model.store.copy_values_from(&best)?;
    Ok(report)
}

fn save_resume(
    model: &Model,
    adam: &Adam,
    best: &crate::nn::ParamStore,
    cfg: &TrainConfig,
    report: &TrainReport,
    path: &Path,
) -> Result<(), ModelError> {
    let mut ckpt = model.to_checkpoint();
    for (i, (_, name, _)) in model.store.iter().enumerate() {
        ckpt.tensors
            .push((format!("adam.m/{name}"), adam.m[i].clone()));
        ckpt.tensors
            .push((format!("adam.v/{name}"), adam.v[i].clone()));
    }
    for (_, name, t) in best.iter() {
        ckpt.tensors.push((format!("best/{name}"), t.clone()));
    }
    let state = ResumeState {
        train: *cfg,
        report: report.clone(),
        adam_step: adam.step,
    };
    ckpt.training = Some(serde_json::to_value(state).expect("state serializes"));
    ckpt.write(path)
}

fn restore(
    model: &mut Model,
    adam: &mut Adam,
    best: &mut crate::nn::ParamStore,
    path: &Path,
) -> Result<TrainReport, ModelError> {
    let bad = |message: String| ModelError::Format {
        path: path.to_path_buf(),
        message,
    };
    let ckpt = Checkpoint::read(path)?;
    if ckpt.config != model.config || ckpt.vocab != model.vocab {
        return Err(bad(
            "checkpoint was written for a different model configuration".into(),
        ));
    }
    let state: ResumeState = ckpt
        .training
        .clone()
        .ok_or_else(|| bad("no training state".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| bad(e.to_string())))?;
    model.load_tensors(&ckpt, "")?;
    let mut best_model = model.clone();
    best_model.load_tensors(&ckpt, "best/")?;
    best.copy_values_from(&best_model.store)?;
    let fetch = |key: String| -> Result<Tensor, ModelError> {
        ckpt.tensor(&key)
            .cloned()
            .ok_or_else(|| bad(format!("missing `{key}`")))
    };
    for (i, (_, name, _)) in model.store.iter().enumerate() {
        adam.m[i] = fetch(format!("adam.m/{name}"))?;
        adam.v[i] = fetch(format!("adam.v/{name}"))?;
    }
    adam.step = state.adam_step;
    Ok(state.report)
}
