//! Seeded training loop: Adam with warmup plus inverse-square-root decay,
//! token-count batching, per-record gradient accumulation weighted by
//! label count, per-epoch metrics, best/last checkpoints and bitwise
//! reproducible resume.

pub mod adam;
pub mod batch;
pub mod schedule;

pub use adam::{adam_step, GradBuffers, OptimizerState};
pub use batch::batch_by_tokens;
pub use schedule::{lr_at, ScheduleConfig};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::data::PreparedRecord;
use crate::error::{Error, Result};
use crate::model::FvpModel;
use crate::nn::Forward;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

pub const BEST_CHECKPOINT: &str = "checkpoint_best.fvpc";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.fvpc";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub clip_norm: Option<f64>,
    /// Hard cap on optimizer updates across the whole run.
    pub max_steps: Option<u64>,
    /// Stop once the epoch train loss drops below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            max_tokens: 1024,
            seed: 0,
            schedule: ScheduleConfig::default(),
            clip_norm: None,
            max_steps: None,
            target_loss: None,
        }
    }
}

/// One metric-log line, appended per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_train_loss: f64,
    pub steps: u64,
    pub epochs_run: usize,
    pub best_valid_loss: Option<f64>,
    pub metrics: Vec<MetricRecord>,
}

/// Derives an independent stream seed from the run seed; used for epoch
/// shuffles and per-record dropout so resume replays the same draws.
pub fn derive_seed(seed: u64, salt_a: u64, salt_b: u64) -> u64 {
    let mut z =
        seed ^ salt_a.wrapping_mul(0x9e3779b97f4a7c15) ^ salt_b.wrapping_mul(0xd1b54a32d192ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Evaluation-mode label-smoothed loss over records, averaged per label
/// token.
pub fn eval_loss(model: &FvpModel, records: &[PreparedRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::usage("eval_loss: no records"));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for r in records {
        let (prefix, labels) = FvpModel::teacher_frames(&r.tgt_ids);
        let mut fwd = Forward::eval(&model.store);
        let logits = model.forward(&mut fwd, &r.src_ids, Some(&r.features), &prefix)?;
        let loss = model.label_smoothed_loss(&mut fwd, logits, &labels)?;
        let value = fwd.graph.value(loss).item()?;
        total += value * labels.len() as f64;
        tokens += labels.len();
    }
    Ok(total / tokens as f64)
}

pub struct TrainSession<'m> {
    pub model: &'m mut FvpModel,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub state: TrainState,
}

impl<'m> TrainSession<'m> {
    pub fn fresh(model: &'m mut FvpModel, config: TrainConfig) -> Result<Self> {
        config.schedule.validate()?;
        let optimizer = OptimizerState::new(&model.store);
        let state = TrainState::fresh(config.seed);
        Ok(TrainSession {
            model,
            config,
            optimizer,
            state,
        })
    }

    /// Resumes from a checkpoint. The checkpoint must carry the same
    /// model configuration, seed and optimizer state layout.
    pub fn resume(
        model: &'m mut FvpModel,
        config: TrainConfig,
        checkpoint: &Checkpoint,
    ) -> Result<Self> {
        config.schedule.validate()?;
        if checkpoint.config != model.config {
            return Err(Error::config(
                "resume: checkpoint model configuration differs from the requested one",
            ));
        }
        if checkpoint.train_state.seed != config.seed {
            return Err(Error::config(format!(
                "resume: checkpoint seed {} differs from configured seed {}",
                checkpoint.train_state.seed, config.seed
            )));
        }
        let restored = checkpoint.restore_model()?;
        *model = restored;
        let optimizer = checkpoint
            .optimizer
            .clone()
            .ok_or_else(|| Error::config("resume: checkpoint carries no optimizer state"))?;
        Ok(TrainSession {
            model,
            config,
            optimizer,
            state: checkpoint.train_state.clone(),
        })
    }

    /// Runs epochs `state.epoch..config.epochs`. `valid` may be empty, in
    /// which case the best checkpoint follows the train loss.
    pub fn run(
        &mut self,
        train: &[PreparedRecord],
        valid: &[PreparedRecord],
        out_dir: Option<&Path>,
    ) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::usage("train: empty training split"));
        }
        let overlap: Vec<&str> = train
            .iter()
            .filter(|t| valid.iter().any(|v| v.id == t.id))
            .map(|t| t.id.as_str())
            .collect();
        if !overlap.is_empty() {
            return Err(Error::config(format!(
                "train: validation split overlaps training split ({})",
                overlap.join(", ")
            )));
        }
        let probe = train.iter().take(4).map(|r| {
            (
                r.src_ids.as_slice(),
                Some(&r.features),
                r.tgt_ids.as_slice(),
            )
        });
        let dead = self.model.gradient_coverage(probe)?;
        if !dead.is_empty() {
            return Err(Error::config(format!(
                "train: parameters receive no gradient: {}",
                dead.join(", ")
            )));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }

        let mut metrics = Vec::new();
        let mut best_metric: Option<f64> = self.state.best_valid_loss;
        let mut final_train_loss = f64::NAN;
        let mut stop = false;

        let start_epoch = self.state.epoch;
        for epoch in start_epoch..self.config.epochs {
            if stop {
                break;
            }
            // deterministic per-epoch order: shuffle then pack
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut epoch_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, 0x0e70c4, epoch as u64));
            order.shuffle(&mut epoch_rng);
            let shuffled: Vec<PreparedRecord> = order.iter().map(|&i| train[i].clone()).collect();
            let batches = batch_by_tokens(&shuffled, self.config.max_tokens)?;

            let mut epoch_loss_sum = 0.0;
            let mut epoch_tokens = 0usize;
            for batch in &batches {
                let weights: Vec<f64> = batch
                    .iter()
                    .map(|&i| (shuffled[i].tgt_ids.len() + 1) as f64)
                    .collect();
                let total_weight: f64 = weights.iter().sum();
                // one graph per batch: records contribute weighted losses
                // to a single scalar, parameters are inserted once
                let step_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.config.seed,
                    0xba7c4,
                    self.state.global_step,
                ));
                let mut fwd = Forward::train(&self.model.store, step_rng);
                let mut total_loss: Option<crate::Var> = None;
                for (&idx, &weight) in batch.iter().zip(&weights) {
                    let record = &shuffled[idx];
                    let (prefix, labels) = FvpModel::teacher_frames(&record.tgt_ids);
                    let logits = self.model.forward(
                        &mut fwd,
                        &record.src_ids,
                        Some(&record.features),
                        &prefix,
                    )?;
                    let loss = self.model.label_smoothed_loss(&mut fwd, logits, &labels)?;
                    let loss_value = fwd.graph.value(loss).item()?;
                    if !loss_value.is_finite() {
                        return Err(Error::numeric(format!(
                            "train: non-finite loss at step {} on record {}",
                            self.state.global_step, record.id
                        )));
                    }
                    let scaled = fwd.graph.scale(loss, weight / total_weight)?;
                    total_loss = Some(match total_loss {
                        None => scaled,
                        Some(acc) => fwd.graph.add(acc, scaled)?,
                    });
                    epoch_loss_sum += loss_value * weight;
                    epoch_tokens += weight as usize;
                }
                let total_loss = total_loss.ok_or_else(|| Error::usage("train: empty batch"))?;
                fwd.graph.backward(total_loss)?;
                let mut grads = GradBuffers::new(&self.model.store);
                for (pid, var) in fwd.used_params() {
                    if let Some(grad) = fwd.graph.grad(var) {
                        grads.accumulate(pid, grad, 1.0);
                    }
                }
                drop(fwd);
                if let Some(clip) = self.config.clip_norm {
                    let norm = grads.global_norm();
                    if norm > clip {
                        grads.scale_all(clip / norm);
                    }
                }
                let lr = lr_at(self.state.global_step, &self.config.schedule);
                adam_step(&mut self.model.store, &grads, &mut self.optimizer, lr)?;
                self.state.global_step += 1;
                if let Some(cap) = self.config.max_steps {
                    if self.state.global_step >= cap {
                        stop = true;
                        break;
                    }
                }
            }

            let train_loss = epoch_loss_sum / epoch_tokens as f64;
            final_train_loss = train_loss;
            let valid_loss = if valid.is_empty() {
                None
            } else {
                Some(eval_loss(self.model, valid)?)
            };
            self.state.epoch = epoch + 1;

            let selection = valid_loss.unwrap_or(train_loss);
            let improved = best_metric.map(|b| selection < b).unwrap_or(true);
            if improved {
                best_metric = Some(selection);
                self.state.best_valid_loss = best_metric;
            }

            let metric = MetricRecord {
                step: self.state.global_step,
                epoch: epoch + 1,
                lr: lr_at(self.state.global_step, &self.config.schedule),
                train_loss,
                valid_loss,
            };
            if let Some(dir) = out_dir {
                append_metric(&dir.join(METRICS_FILE), &metric)?;
                let ck = Checkpoint::capture(self.model, &self.state, Some(&self.optimizer));
                ck.write(&dir.join(LAST_CHECKPOINT))?;
                if improved {
                    ck.write(&dir.join(BEST_CHECKPOINT))?;
                }
            }
            metrics.push(metric);

            if let Some(target) = self.config.target_loss {
                if train_loss < target {
                    stop = true;
                }
            }
        }

        Ok(TrainOutcome {
            final_train_loss,
            steps: self.state.global_step,
            epochs_run: self.state.epoch - start_epoch,
            best_valid_loss: self.state.best_valid_loss,
            metrics,
        })
    }
}

fn append_metric(path: &Path, metric: &MetricRecord) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(
        file,
        "{}",
        serde_json::to_string(metric).map_err(|e| Error::data(e.to_string()))?
    )?;
    Ok(())
}
