//! v-prediction training with conditional/unconditional mixing, few-shot
//! fine-tuning and checkpointing.

mod checkpoint;
mod data;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{make_example, prepare_examples, prepare_planned, ReferenceMode, TrainingExample};
pub use optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig};

use crate::backbone::Backbone;
use crate::conditioning::Provenance;
use crate::diffusion::sampler::gaussian;
use crate::diffusion::{forward_sample, velocity, Condition, NoiseSchedule, Predictor};
use crate::error::{Error, Result};
use crate::latent::{LatentSequence, Velocity};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Overrides applied by [`finetune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 32,
            epochs: 20,
        }
    }
}

/// Learning-rate curve over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `final_lr` over all steps of the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// End point of the cosine schedule.
    pub final_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub uncond_fraction: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub adam: AdamWConfig,
    pub seed: u64,
    pub few_shot: FewShotConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            final_lr: 0.0,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            uncond_fraction: 0.10,
            grad_clip: 1.0,
            adam: AdamWConfig::default(),
            seed: 0,
            few_shot: FewShotConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.final_lr >= 0.0 && self.final_lr <= self.lr) {
            return bad("final_lr must lie in [0, lr]");
        }
        if !(0.0..=1.0).contains(&self.uncond_fraction) {
            return bad("uncond_fraction must lie in [0, 1]");
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be nonnegative");
        }
        Ok(())
    }

    /// Learning rate for zero-based `step` of a run of `total_steps`.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let progress = (step as f64 / total_steps.max(1) as f64).min(1.0);
                self.final_lr + 0.5 * (self.lr - self.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// This config with the few-shot learning rate, batch size and epochs.
    pub fn few_shot_variant(&self) -> Self {
        Self {
            lr: self.few_shot.lr,
            final_lr: self.final_lr.min(self.few_shot.lr),
            batch_size: self.few_shot.batch_size,
            epochs: self.few_shot.epochs,
            ..self.clone()
        }
    }
}

/// Noisy input, regression target and condition choice for one item.
#[derive(Debug, Clone)]
pub struct StepInput<T> {
    pub t: usize,
    pub x_t: LatentSequence<T>,
    pub target: Velocity<T>,
    pub null: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub timesteps: Vec<usize>,
    /// Items trained with the null condition.
    pub null_count: usize,
}

/// Draws `t ~ U{1..T}`, Gaussian noise and the null-condition coin for each
/// item, in batch order.
pub fn draw_step_inputs<T: Scalar>(
    batch: &[&TrainingExample<T>],
    schedule: &NoiseSchedule,
    uncond_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepInput<T>>> {
    batch
        .iter()
        .map(|ex| {
            let t = rng.random_range(1..=schedule.steps());
            let (n, c) = ex.x0.shape();
            let eps = LatentSequence::from_matrix_unchecked(gaussian::<T>(rng, n, c));
            let null = rng.random::<f64>() < uncond_fraction;
            Ok(StepInput {
                t,
                x_t: forward_sample(&ex.x0, &eps, t, schedule)?,
                target: velocity(&ex.x0, &eps, t, schedule)?,
                null,
            })
        })
        .collect()
}

fn condition<'a, T: Scalar>(ex: &'a TrainingExample<T>, input: &StepInput<T>) -> Condition<'a, T> {
    if input.null {
        Condition::Null
    } else {
        Condition::Reference(&ex.reference)
    }
}

fn non_finite(step: u64, inputs: &[(usize, f64, f64)]) -> Error {
    Error::NonFiniteLoss {
        step,
        timesteps: inputs.iter().map(|i| i.0).collect(),
        pred_norm: inputs.iter().map(|i| i.1 * i.1).sum::<f64>().sqrt(),
        target_norm: inputs.iter().map(|i| i.2 * i.2).sum::<f64>().sqrt(),
    }
}

/// Mean squared velocity error of any predictor on prepared inputs.
pub fn loss_from_inputs<T: Scalar, P: Predictor<T> + ?Sized>(
    batch: &[&TrainingExample<T>],
    inputs: &[StepInput<T>],
    predictor: &P,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (ex, input) in batch.iter().zip(inputs) {
        let pred = predictor.predict(&input.x_t, &ex.x_m, condition(ex, input), input.t)?;
        sum += pred
            .matrix()
            .data()
            .iter()
            .zip(input.target.matrix().data())
            .map(|(p, v)| (p.f64() - v.f64()).powi(2))
            .sum::<f64>();
        count += pred.matrix().data().len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Loss of a predictor on a freshly drawn step (no gradients).
pub fn batch_loss<T: Scalar, P: Predictor<T> + ?Sized>(
    batch: &[&TrainingExample<T>],
    predictor: &P,
    schedule: &NoiseSchedule,
    uncond_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let inputs = draw_step_inputs(batch, schedule, uncond_fraction, rng)?;
    Ok(StepStats {
        loss: loss_from_inputs(batch, &inputs, predictor)?,
        timesteps: inputs.iter().map(|i| i.t).collect(),
        null_count: inputs.iter().filter(|i| i.null).count(),
    })
}

/// One forward/backward pass over a batch. Gradients of the mean squared
/// velocity error are accumulated into `grad`.
pub fn training_step<T: Scalar>(
    batch: &[&TrainingExample<T>],
    model: &Backbone<T>,
    schedule: &NoiseSchedule,
    uncond_fraction: f64,
    rng: &mut ChaCha8Rng,
    grad: &mut Backbone<T>,
    step: u64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let inputs = draw_step_inputs(batch, schedule, uncond_fraction, rng)?;
    let total: usize = inputs.iter().map(|i| i.target.matrix().data().len()).sum();
    let scale = T::of(2.0 / total as f64);
    let mut sum = 0.0;
    let mut diag = Vec::with_capacity(batch.len());
    for (ex, input) in batch.iter().zip(&inputs) {
        let (pred, cache) = model.forward_cached(&input.x_t, &ex.x_m, condition(ex, input), input.t)?;
        let diff: Matrix<T> = pred.zip_map(input.target.matrix(), |p, v| p - v);
        sum += diff.sum_sq().f64();
        diag.push((input.t, pred.sum_sq().f64().sqrt(), input.target.matrix().sum_sq().f64().sqrt()));
        let mut dv = diff;
        dv.scale(scale);
        model.backward(&cache, &dv, grad);
    }
    let loss = sum / total as f64;
    if !loss.is_finite() {
        return Err(non_finite(step, &diag));
    }
    Ok(StepStats {
        loss,
        timesteps: inputs.iter().map(|i| i.t).collect(),
        null_count: inputs.iter().filter(|i| i.null).count(),
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for one `(epoch, step)` so that resumed runs replay exactly.
fn derived_rng(seed: u64, epoch: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ epoch) ^ step))
}

const VALID_STREAM: u64 = u64::MAX;

/// Conditional-only loss on a held-out set with a fixed noise draw.
pub fn validation_loss<T: Scalar>(
    model: &Backbone<T>,
    schedule: &NoiseSchedule,
    examples: &[TrainingExample<T>],
    seed: u64,
) -> Result<f64> {
    let mut rng = derived_rng(seed, VALID_STREAM, 0);
    let refs: Vec<&TrainingExample<T>> = examples.iter().collect();
    let mut weighted = 0.0;
    let mut count = 0usize;
    for chunk in refs.chunks(32) {
        let inputs = draw_step_inputs(chunk, schedule, 0.0, &mut rng)?;
        let n: usize = inputs.iter().map(|i| i.target.matrix().data().len()).sum();
        weighted += loss_from_inputs(chunk, &inputs, model)? * n as f64;
        count += n;
    }
    Ok(weighted / count.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step { step: u64, epoch: usize, loss: f64, lr: f64 },
    Epoch { epoch: usize, train_loss: f64, valid_loss: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// State after the final epoch, optimizer included.
    pub last: Checkpoint<T>,
    /// Weights with the lowest validation loss (training loss when there is
    /// no validation set).
    pub best: Backbone<T>,
    pub history: Vec<EpochSummary>,
}

/// Where [`train`] writes `best.ckpt`, `last.ckpt` and `train_log.jsonl`.
#[derive(Debug, Clone, Default)]
pub struct OutputDir(pub Option<PathBuf>);

impl OutputDir {
    pub fn none() -> Self {
        Self(None)
    }

    pub fn at(path: &Path) -> Self {
        Self(Some(path.to_path_buf()))
    }
}

/// Starting point for a fresh run.
pub fn initial_state<T: Scalar>(model: Backbone<T>, schedule: NoiseSchedule) -> Checkpoint<T> {
    Checkpoint {
        model,
        schedule,
        metadata: TrainingMetadata::default(),
        optimizer: None,
    }
}

/// Runs epochs `state.metadata.epochs_completed .. cfg.epochs`. Passing a
/// loaded checkpoint resumes with its optimizer state.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    state: Checkpoint<T>,
    train_set: &[TrainingExample<T>],
    valid_set: &[TrainingExample<T>],
    out: &OutputDir,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let Checkpoint {
        mut model,
        schedule,
        mut metadata,
        optimizer,
    } = state;
    let mut opt = match optimizer {
        Some(o) => {
            o.check_compatible(&model)?;
            o
        }
        None => AdamW::new(&model, cfg.adam),
    };
    metadata.train_config = Some(cfg.clone());
    let mut log = match &out.0 {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let mut write_log = |rec: &LogRecord| -> Result<()> {
        if let Some((path, w)) = log.as_mut() {
            let line = serde_json::to_string(rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    };

    let mut grad = model.zeros_like();
    let mut best = model.clone();
    let mut best_score = metadata.best_valid_loss.unwrap_or(f64::INFINITY);
    let mut history = Vec::new();
    let total_steps = (cfg.epochs * train_set.len().div_ceil(cfg.batch_size)) as u64;
    for epoch in metadata.epochs_completed..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, epoch as u64, u64::MAX - 1));
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingExample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut rng = derived_rng(cfg.seed, epoch as u64, s as u64);
            for (_, g) in grad.tensors_mut() {
                g.fill(T::zero());
            }
            let stats = training_step(&batch, &model, &schedule, cfg.uncond_fraction, &mut rng, &mut grad, metadata.global_step)?;
            clip_grad_norm(&mut grad, cfg.grad_clip);
            let lr = cfg.lr_at(metadata.global_step, total_steps);
            opt.update(&mut model, &grad, lr, cfg.weight_decay);
            metadata.global_step += 1;
            epoch_sum += stats.loss;
            batches += 1;
            write_log(&LogRecord::Step {
                step: metadata.global_step,
                epoch,
                loss: stats.loss,
                lr,
            })?;
        }
        let train_loss = epoch_sum / batches as f64;
        let valid_loss = if valid_set.is_empty() {
            None
        } else {
            Some(validation_loss(&model, &schedule, valid_set, cfg.seed)?)
        };
        log::info!(
            "epoch {}/{} train loss {train_loss:.5}{}",
            epoch + 1,
            cfg.epochs,
            valid_loss.map(|v| format!(" valid loss {v:.5}")).unwrap_or_default()
        );
        write_log(&LogRecord::Epoch {
            epoch,
            train_loss,
            valid_loss,
        })?;
        metadata.epochs_completed = epoch + 1;
        metadata.last_train_loss = Some(train_loss);
        let score = valid_loss.unwrap_or(train_loss);
        let improved = score < best_score;
        if improved {
            best_score = score;
            best = model.clone();
            metadata.best_valid_loss = Some(score);
        }
        history.push(EpochSummary {
            epoch,
            train_loss,
            valid_loss,
        });
        if let Some(dir) = &out.0 {
            let snapshot = Checkpoint {
                model: model.clone(),
                schedule: schedule.clone(),
                metadata: metadata.clone(),
                optimizer: Some(opt.clone()),
            };
            if improved {
                Checkpoint {
                    optimizer: None,
                    ..snapshot.clone()
                }
                .save(&dir.join("best.ckpt"))?;
            }
            snapshot.save(&dir.join("last.ckpt"))?;
        }
    }
    if let Some((path, w)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(TrainOutcome {
        last: Checkpoint {
            model,
            schedule,
            metadata,
            optimizer: Some(opt),
        },
        best,
        history,
    })
}

/// Continues training a checkpoint on a small labelled set with the
/// few-shot learning rate, batch size and epoch count, and a fresh
/// optimizer.
pub fn finetune<T: Scalar>(
    base: Checkpoint<T>,
    cfg: &TrainConfig,
    examples: &[TrainingExample<T>],
    valid_set: &[TrainingExample<T>],
    out: &OutputDir,
) -> Result<TrainOutcome<T>> {
    if examples.is_empty() {
        return Err(Error::Input("few-shot set is empty".into()));
    }
    if let Some(ex) = examples.iter().find(|e| e.reference.provenance() == Provenance::Null) {
        return Err(Error::Input(format!(
            "{} (class {:?}) has no reference embedding",
            ex.id, ex.class
        )));
    }
    let state = Checkpoint {
        model: base.model,
        schedule: base.schedule,
        metadata: TrainingMetadata {
            stage: "finetune".into(),
            ..Default::default()
        },
        optimizer: None,
    };
    train(&cfg.few_shot_variant(), state, examples, valid_set, out)
}
