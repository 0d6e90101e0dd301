//! Optimizer, learning-rate schedule and the training loop.

mod optim;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{nadam_step, step_lr, NAdamConfig, NAdamState, StepOutcome};

use crate::csidata::Sample;
use crate::diffmath::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::loss::{chamfer, total_loss_node, LossConfig};
use crate::model::{dropout_rng, save_checkpoint, Dropout, Model, OptimizerState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the dataset held out for validation.
    pub val_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    #[serde(flatten)]
    pub nadam: NAdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            epochs: 50,
            step_size: 10,
            gamma: 0.5,
            batch_size: 16,
            seed: 0,
            val_fraction: 0.2,
            grad_clip: 0.0,
            nadam: NAdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.step_size == 0 || self.batch_size == 0 {
            return Err(Error::config("step_size and batch_size must be >= 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip must be >= 0"));
        }
        self.nadam.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.lr0, self.gamma, self.step_size, epoch)
    }
}

/// Learning rate for a 0-based epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr_at(epoch)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_chamfer: f64,
    pub val_chamfer: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// Equality on everything except wall-clock time.
    pub fn same_run(&self, other: &Self) -> bool {
        (self.epoch, self.lr.to_bits(), self.train_loss.to_bits(), self.train_chamfer.to_bits(), self.val_chamfer.to_bits())
            == (other.epoch, other.lr.to_bits(), other.train_loss.to_bits(), other.train_chamfer.to_bits(), other.val_chamfer.to_bits())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Records written by this call (a resumed run only lists its own).
    pub records: Vec<EpochRecord>,
    pub best_val_chamfer: f64,
    pub metrics_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub skipped_steps: u64,
}

/// Loss terms and gradients for one sample.
struct SampleGrad {
    total: f64,
    chamfer: f64,
    grads: Vec<Tensor>,
}

fn sample_grad(model: &Model, sample: &Sample, loss: &LossConfig, seed: u64, step: u64, index: usize) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let rate = model.config().dropout;
    let mut rng = dropout_rng(seed, step, index as u64);
    let dropout = (rate > 0.0).then(|| Dropout { rate, rng: &mut rng });
    let out = model.forward(&mut g, &p, &sample.input, dropout)?;
    let target = g.constant(sample.target.to_tensor());
    let nodes = total_loss_node(&mut g, out.points, target, out.t_f, loss)?;
    let total = g.value(nodes.total).item();
    let chamfer = g.value(nodes.chamfer).item();
    let grads = g.backward(nodes.total)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    Ok(SampleGrad { total, chamfer, grads })
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

fn round_f32(tensors: &mut [Tensor]) {
    for t in tensors {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Mean validation Chamfer distance of the model's predictions.
pub fn validation_chamfer(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("empty validation set"));
    }
    let inputs: Vec<_> = samples.iter().map(|s| s.input.clone()).collect();
    let preds = model.predict_batch(&inputs)?;
    let per: Vec<f64> = preds
        .par_iter()
        .zip(samples)
        .map(|(p, s)| chamfer(p, &s.target))
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Shuffled sample order for an epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::Divergence { epoch, msg },
        other => other,
    }
}

/// Trains `model` in place, writing `metrics.jsonl`, `best.ckpt` and
/// `last.ckpt` into `out_dir`.
///
/// With `resume`, training continues after `resume.epoch` completed
/// epochs and appends to the existing metrics log. The run is a pure
/// function of the data, configs and seed; thread count does not matter.
pub fn train_loop(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    loss: &LossConfig,
    out_dir: &Path,
    resume: Option<OptimizerState>,
) -> Result<TrainSummary> {
    config.validate()?;
    loss.validate()?;
    if train.is_empty() {
        return Err(Error::config("empty training set"));
    }
    if val.is_empty() {
        return Err(Error::config("empty validation set"));
    }
    for s in train.iter().chain(val) {
        model.check_input(&s.input).map_err(|e| match e {
            Error::Shape(msg) => Error::Shape(format!("sample {}: {msg}", s.id)),
            other => other,
        })?;
    }
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);

    let (mut state, start_epoch, mut best_val) = match resume {
        Some(o) => {
            if o.seed != config.seed {
                return Err(Error::config(format!(
                    "checkpoint was trained with seed {}, config has {}",
                    o.seed, config.seed
                )));
            }
            let state = NAdamState {
                m: o.m,
                v: o.v,
                step: o.step,
                mu_product: o.mu_product,
            };
            (state, o.epoch as usize, o.best_val)
        }
        None => (NAdamState::new(model.params().tensors()), 0, f64::INFINITY),
    };
    let snapshot = |state: &NAdamState, epoch: usize, best_val: f64| OptimizerState {
        epoch: epoch as u64,
        step: state.step,
        mu_product: state.mu_product,
        best_val,
        seed: config.seed,
        m: state.m.clone(),
        v: state.v.clone(),
    };

    let mut log = if start_epoch == 0 {
        save_checkpoint(model, Some(&snapshot(&state, 0, best_val)), &last_path)?;
        File::create(&metrics_path)?
    } else {
        // Drop records past the resume point, e.g. when resuming from an
        // earlier best checkpoint.
        let kept: Vec<EpochRecord> = if metrics_path.exists() {
            read_metrics(&metrics_path)?
                .into_iter()
                .filter(|r| r.epoch < start_epoch)
                .collect()
        } else {
            Vec::new()
        };
        let mut f = File::create(&metrics_path)?;
        for r in &kept {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f
    };

    let mut records = Vec::new();
    let mut skipped = 0u64;
    for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        let order = epoch_order(train.len(), config.seed, epoch);
        let (mut loss_sum, mut chamfer_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            log::debug!("epoch {epoch} step {} batch {:?}", state.step + 1, batch);
            let step = state.step;
            let model_ref = &*model;
            let per: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| sample_grad(model_ref, &train[i], loss, config.seed, step, i))
                .collect::<Result<_>>()
                .map_err(|e| divergence(epoch, e))?;
            let mut grads = model.params().zeros_like();
            for sg in &per {
                if !sg.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        msg: format!("loss is {}", sg.total),
                    });
                }
                loss_sum += sg.total;
                chamfer_sum += sg.chamfer;
                for (acc, g) in grads.iter_mut().zip(&sg.grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / per.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if config.grad_clip > 0.0 {
                clip_global_norm(&mut grads, config.grad_clip);
            }
            let outcome = nadam_step(model.params_mut().tensors_mut(), &grads, &mut state, lr, &config.nadam)?;
            if outcome == StepOutcome::SkippedNonFinite {
                skipped += 1;
            }
            // Keep all persistent state on the f32 grid so a checkpoint
            // round trip is exact.
            round_f32(model.params_mut().tensors_mut());
            round_f32(&mut state.m);
            round_f32(&mut state.v);
        }
        if model.params().tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                msg: "parameters became non-finite".into(),
            });
        }
        let val_chamfer = validation_chamfer(model, val).map_err(|e| divergence(epoch, e))?;
        if !val_chamfer.is_finite() {
            return Err(Error::Divergence {
                epoch,
                msg: format!("validation Chamfer is {val_chamfer}"),
            });
        }
        let improved = val_chamfer < best_val;
        if improved {
            best_val = val_chamfer;
        }
        let opt = snapshot(&state, epoch + 1, best_val);
        if improved {
            save_checkpoint(model, Some(&opt), &best_path)?;
        }
        save_checkpoint(model, Some(&opt), &last_path)?;

        let n = train.len() as f64;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_chamfer: chamfer_sum / n,
            val_chamfer,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train_loss {:.6} train_chamfer {:.6} val_chamfer {:.6}",
            record.train_loss,
            record.train_chamfer,
            record.val_chamfer
        );
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        log.flush()?;
        records.push(record);
    }
    if !best_path.exists() {
        fs::copy(&last_path, &best_path)?;
    }
    Ok(TrainSummary {
        records,
        best_val_chamfer: best_val,
        metrics_path,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        skipped_steps: skipped,
    })
}

#[cfg(test)]
mod tests;
