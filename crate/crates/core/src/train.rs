//! Loss, optimizer, schedule, metrics and the epoch loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape};
use crate::checkpoint::{self, CheckpointError};
use crate::dataset::SkeletonSequence;
use crate::layers::{ForwardCtx, Mode, Module};
use crate::model::{sample_rng, IstaNet, ModelError};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {}", format_norms(.param_norms))]
    NonFinite {
        epoch: usize,
        batch: usize,
        param_norms: Vec<(String, f64)>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

fn format_norms(norms: &[(String, f64)]) -> String {
    norms
        .iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_decay_epochs() -> Vec<usize> {
    vec![60, 90]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// Epoch indices (0-based) from which the next decay applies.
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub temperature: f64,
    pub entity_rearrangement: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            lr_decay: 0.1,
            decay_epochs: default_decay_epochs(),
            batch_size: 32,
            epochs: 110,
            label_smoothing: 0.1,
            temperature: 1.0,
            entity_rearrangement: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Usage(m.to_string()));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

/// Step decay: `lr * decay^(milestones reached)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.decay_epochs.iter().filter(|&&m| epoch >= m).count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}

/// Label-smoothed, temperature-scaled cross entropy of a single logit vector.
pub fn ce_label_smoothing(logits: &[f64], label: usize, eps: f64, tau: f64) -> f64 {
    let k = logits.len() as f64;
    let mx = logits
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let lse = logits
        .iter()
        .map(|z| (z / tau - mx).exp())
        .sum::<f64>()
        .ln()
        + mx;
    logits
        .iter()
        .enumerate()
        .map(|(j, z)| {
            let target = eps / k + if j == label { 1.0 - eps } else { 0.0 };
            -target * (z / tau - lse)
        })
        .sum()
}

/// One Nesterov update: `v = mu*v + g; w -= lr*(g + mu*v)`.
pub fn nesterov_update<R: Real>(w: &mut [R], g: &[R], v: &mut [R], lr: R, mu: R) {
    for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = mu * *vi + *gi;
        *wi -= lr * (*gi + mu * *vi);
    }
}

/// SGD with Nesterov momentum, velocity keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Nesterov<R> {
    pub momentum: R,
    pub velocity: BTreeMap<String, Vec<R>>,
}

impl<R: Real> Nesterov<R> {
    pub fn new(momentum: f64) -> Self {
        Nesterov {
            momentum: R::lit(momentum),
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Module<R>, lr: R) -> Result<()> {
        let mut missing = None;
        let mu = self.momentum;
        let velocity = &mut self.velocity;
        model.visit_params_mut(&mut |p| {
            let Some(g) = p.tensor.grad.take() else {
                missing.get_or_insert_with(|| p.name.clone());
                return;
            };
            let v = velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![R::zero(); g.len()]);
            nesterov_update(p.tensor.data_mut(), &g, v, lr, mu);
            p.tensor.grad = Some(g);
        });
        match missing {
            Some(name) => Err(TrainError::Usage(format!(
                "parameter {name} has no gradient"
            ))),
            None => Ok(()),
        }
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<R: Real>(v: &[R]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` is among the `k` largest logits (ties resolved toward lower indices).
pub fn in_topk<R: Real>(logits: &[R], label: usize, k: usize) -> bool {
    let target = logits[label];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > target || (x == target && i < label))
        .count();
    ahead < k
}

/// Eval-mode logits for already prepared clips, in input order.
pub fn predict<R: Real>(
    model: &IstaNet<R>,
    prepared: &[SkeletonSequence],
    batch: usize,
) -> Result<Vec<Vec<R>>> {
    let chunks: Vec<&[SkeletonSequence]> = prepared.chunks(batch.max(1)).collect();
    let results: Vec<Result<Vec<Vec<R>>>> = chunks
        .par_iter()
        .map(|chunk| {
            let tokens = chunk
                .iter()
                .map(|s| model.tokens_of(s, None))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(&tokens).map_err(ModelError::from)?);
            let mut ctx = ForwardCtx::new(Mode::Eval);
            let logits = model.forward_tokens(&mut tape, x, &mut ctx)?;
            let k = model.config.num_classes;
            Ok(tape
                .value(logits)
                .data()
                .chunks(k)
                .map(|c| c.to_vec())
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(prepared.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Fraction of clips whose label is among the `k` highest logits.
pub fn evaluate_topk<R: Real>(
    model: &IstaNet<R>,
    prepared: &[SkeletonSequence],
    k: usize,
) -> Result<f64> {
    if prepared.is_empty() {
        return Err(TrainError::Usage("cannot evaluate an empty split".into()));
    }
    let logits = predict(model, prepared, 32)?;
    Ok(topk_fraction(&logits, prepared.iter().map(|s| s.label), k))
}

pub fn topk_fraction<R: Real>(
    logits: &[Vec<R>],
    labels: impl Iterator<Item = usize>,
    k: usize,
) -> f64 {
    let mut hits = 0;
    let mut n = 0;
    for (l, y) in logits.iter().zip(labels) {
        n += 1;
        if in_topk(l, y, k) {
            hits += 1;
        }
    }
    hits as f64 / n.max(1) as f64
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
}

pub struct Trainer<R> {
    pub model: IstaNet<R>,
    pub optimizer: Nesterov<R>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl<R: Real> Trainer<R> {
    pub fn new(model: IstaNet<R>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: Nesterov::new(config.momentum),
            model,
            config,
            epoch: 0,
        })
    }

    /// Centers and resamples clips to the model's input shape.
    pub fn prepare_all(&self, clips: &[SkeletonSequence]) -> Result<Vec<SkeletonSequence>> {
        clips
            .par_iter()
            .map(|c| self.model.prepare(c).map_err(TrainError::from))
            .collect()
    }

    fn param_norms(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        self.model.visit_params(&mut |p| {
            let n = p
                .tensor
                .data()
                .iter()
                .map(|v| v.as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            out.push((p.name.clone(), n));
        });
        out
    }

    /// One pass over `train` in shuffled mini-batches, then validation.
    pub fn run_epoch(
        &mut self,
        train: &[SkeletonSequence],
        val: &[SkeletonSequence],
    ) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(TrainError::Usage("training split is empty".into()));
        }
        let cfg = self.config.clone();
        let e = self.epoch;
        let lr = lr_schedule(e, &cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(e as u64 + 1);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tokens = batch
                .par_iter()
                .map(|&i| {
                    if cfg.entity_rearrangement {
                        let mut rng = sample_rng(cfg.seed, e as u64, i as u64);
                        self.model.tokens_of(&train[i], Some(&mut rng))
                    } else {
                        self.model.tokens_of(&train[i], None)
                    }
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(&tokens).map_err(ModelError::from)?);
            let mut ctx = ForwardCtx::new(Mode::Train);
            let logits = self.model.forward_tokens(&mut tape, x, &mut ctx)?;
            let loss = tape.cross_entropy(
                logits,
                &labels,
                R::lit(cfg.label_smoothing),
                R::lit(cfg.temperature),
            )?;
            let loss_value = tape.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: e,
                    batch: bi,
                    param_norms: self.param_norms(),
                });
            }
            let k = self.model.config.num_classes;
            for (row, &y) in tape.value(logits).data().chunks(k).zip(&labels) {
                if argmax(row) == y {
                    hits += 1;
                }
            }
            loss_sum += loss_value * batch.len() as f64;
            tape.backward(loss)?;
            self.model.collect_grads(&tape, false);
            self.model.apply_norm_stats(&ctx);
            self.optimizer.step(&mut self.model, R::lit(lr))?;
        }
        self.epoch += 1;
        let val_top1 = if val.is_empty() {
            None
        } else {
            Some(evaluate_topk(&self.model, val, 1)?)
        };
        Ok(EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_top1: hits as f64 / train.len() as f64,
            val_top1,
        })
    }

    /// Runs the remaining epochs. With `out_dir`, writes `metrics.jsonl`
    /// (deterministic), `timing.jsonl` (wall clock), and writes a checkpoint
    /// per epoch plus `final.ckpt`.
    pub fn fit(
        &mut self,
        train: &[SkeletonSequence],
        val: &[SkeletonSequence],
        out_dir: Option<&Path>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut logs = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                // A fresh run starts new logs; a resumed one extends them.
                let fresh = self.epoch == 0;
                let open = |name: &str| {
                    let p = dir.join(name);
                    fs::OpenOptions::new()
                        .create(true)
                        .write(true)
                        .truncate(fresh)
                        .append(!fresh)
                        .open(&p)
                        .map_err(io_err(&p))
                };
                Some((open("metrics.jsonl")?, open("timing.jsonl")?))
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let start = Instant::now();
            let m = self.run_epoch(train, val)?;
            let wall_ms = start.elapsed().as_millis() as u64;
            log::info!(
                "epoch {} lr {:.4} loss {:.4} train {:.4} val {}",
                m.epoch,
                m.lr,
                m.train_loss,
                m.train_top1,
                m.val_top1.map_or("-".into(), |v| format!("{v:.4}"))
            );
            if let (Some(dir), Some((metrics, timing))) = (out_dir, logs.as_mut()) {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(metrics, "{line}").map_err(io_err(&dir.join("metrics.jsonl")))?;
                writeln!(timing, "{{\"epoch\":{},\"wall_ms\":{wall_ms}}}", m.epoch)
                    .map_err(io_err(&dir.join("timing.jsonl")))?;
                let bytes = checkpoint::save(self)?;
                for name in [
                    format!("epoch_{:04}.ckpt", m.epoch),
                    "final.ckpt".to_string(),
                ] {
                    let p = dir.join(name);
                    fs::write(&p, &bytes).map_err(io_err(&p))?;
                }
            }
            history.push(m);
        }
        Ok(history)
    }
}
