//! Training engine: Adam with bias correction, linear warm-up plus cosine
//! decay, the BCE+Dice objective, seeded shuffling, per-epoch validation and
//! best-Dice checkpoint selection.
//!
//! A run is a pure function of (seed, configs, dataset): the training log
//! (minus wall-clock fields) and the resulting checkpoint are reproducible
//! bit for bit.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use s3tu::autodiff::Tape;
use s3tu::blocks::{Forward, ParamKind, Params, RELU_SCALE_MIN, RELU_SCALE_SUFFIX};
use s3tu::data::SamplePair;
use s3tu::error::{Error, Result};
use s3tu::metrics::{bce_dice_loss, sample_metrics, MetricReport};
use s3tu::model::{Model, ModelConfig};
use s3tu::rng::Rng;
use s3tu::tensor::Tensor;

fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    300
}
fn default_warmup() -> usize {
    1
}
fn default_half() -> f64 {
    0.5
}
fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_half")]
    pub w_bce: f64,
    #[serde(default = "default_half")]
    pub w_dice: f64,
    /// Trailing fraction of the dataset used for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Adam {
    /// (first moment, second moment) per parameter name.
    state: HashMap<String, (Tensor, Tensor)>,
    /// Completed steps (bias-correction exponent).
    pub t: usize,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// One update: p -= lr * m_hat / (sqrt(v_hat) + eps), in place.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        debug_assert_eq!(param.shape(), grad.shape());
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let t = self.t as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Learning rate at a 0-based step: linear ramp 0 -> lr over the warm-up
/// steps, then cosine decay to lr/100 at the final step.
pub fn lr_at(step: usize, warmup_steps: usize, total_steps: usize, lr: f64) -> f64 {
    const FLOOR: f64 = 0.01;
    if step < warmup_steps {
        return lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps + 1 || step >= total_steps {
        return lr * FLOOR;
    }
    let q = (step - warmup_steps) as f64 / (total_steps - 1 - warmup_steps) as f64;
    lr * (FLOOR + (1.0 - FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * q).cos()))
}

// ---------------------------------------------------------------------------
// training log
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_dsc: f64,
    pub val: MetricReport,
    pub best_dsc_so_far: f64,
    /// Wall clock; excluded from the canonical (determinism-checked) form.
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dsc: f64,
}

impl TrainLog {
    /// Deterministic serialization: everything except wall-clock fields.
    /// Two runs with identical (seed, configs, dataset) produce identical
    /// canonical bytes.
    pub fn canonical_json(&self) -> String {
        #[derive(Serialize)]
        struct CanonEpoch<'a> {
            epoch: usize,
            train_dsc: f64,
            val: &'a MetricReport,
            best_dsc_so_far: f64,
        }
        #[derive(Serialize)]
        struct Canon<'a> {
            steps: &'a [StepRecord],
            epochs: Vec<CanonEpoch<'a>>,
            best_epoch: usize,
            best_dsc: f64,
        }
        let canon = Canon {
            steps: &self.steps,
            epochs: self
                .epochs
                .iter()
                .map(|e| CanonEpoch {
                    epoch: e.epoch,
                    train_dsc: e.train_dsc,
                    val: &e.val,
                    best_dsc_so_far: e.best_dsc_so_far,
                })
                .collect(),
            best_epoch: self.best_epoch,
            best_dsc: self.best_dsc,
        };
        serde_json::to_string_pretty(&canon).expect("train log json")
    }
}

pub struct TrainOutcome {
    /// Model state with the best validation Dice.
    pub best_model: Model,
    /// Final model state after the last epoch.
    pub final_model: Model,
    pub log: TrainLog,
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

/// Stack samples into [B, 1, H, W] image and mask tensors.
fn stack_batch(samples: &[&SamplePair]) -> Result<(Tensor, Tensor)> {
    let shape = samples[0].image.shape();
    let (h, w) = (shape[1], shape[2]);
    let b = samples.len();
    let mut images = Vec::with_capacity(b * h * w);
    let mut masks = Vec::with_capacity(b * h * w);
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::shape(
                "batch",
                format!("sample {} has shape {:?}, expected {:?}", s.id, s.image.shape(), shape),
            ));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    Ok((
        Tensor::new(vec![b, 1, h, w], images)?,
        Tensor::new(vec![b, 1, h, w], masks)?,
    ))
}

/// Deterministic split: leading samples train, trailing fraction validates.
pub fn split_train_val(samples: &[SamplePair], val_fraction: f64) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let n_val = ((samples.len() as f64) * val_fraction).round() as usize;
    let n_train = samples.len().saturating_sub(n_val);
    (
        samples[..n_train].to_vec(),
        samples[n_train..].to_vec(),
    )
}

// ---------------------------------------------------------------------------
// train / evaluate / predict
// ---------------------------------------------------------------------------

pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new();
    let mut log = TrainLog::default();

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    let mut best_model = model.clone();
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let epoch_start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        // distinct stream domains: epoch shuffles vs per-step DropBlock
        Rng::for_stream(cfg.seed, 0x1000_0000_0000_0000 | epoch as u64).shuffle(&mut order);

        let mut epoch_dsc_sum = 0.0;
        let mut epoch_dsc_count = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch norm needs at least 2 samples
            }
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (images, masks) = stack_batch(&batch)?;
            let lr = lr_at(global_step, warmup_steps, total_steps, cfg.lr);

            // any numerical failure inside a step aborts with the step's
            // coordinates and the recent loss history
            let diagnose = |what: String, log: &TrainLog| {
                let tail: Vec<f64> = log.steps.iter().rev().take(5).map(|s| s.loss).collect();
                Error::Numerical(format!(
                    "{what} at epoch {epoch} step {global_step} (lr {lr:.2e}; recent losses {tail:?})"
                ))
            };
            let mut tape = Tape::new();
            let x = tape.constant(images);
            let g = tape.constant(masks);
            let mut fw = Forward::new(
                &mut tape,
                true,
                Rng::for_stream(cfg.seed, 0x2000_0000_0000_0000 | global_step as u64),
            );
            let p = match model.forward(&mut fw, x) {
                Ok(p) => p,
                Err(Error::Numerical(m)) => return Err(diagnose(m, &log)),
                Err(other) => return Err(other),
            };
            let loss = match bce_dice_loss(fw.tape, p, g, cfg.w_bce, cfg.w_dice) {
                Ok(loss) => loss,
                Err(Error::Numerical(m)) => return Err(diagnose(m, &log)),
                Err(other) => return Err(other),
            };
            let (param_ids, stat_updates) = fw.into_outputs();

            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(diagnose(format!("non-finite loss {loss_val}"), &log));
            }

            // batch Dice of the training forward, for the log
            let p_val = tape.value(p).clone();
            let g_val = tape.value(g).clone();
            epoch_dsc_sum += s3tu::metrics::dsc(&p_val, &g_val, false)?;
            epoch_dsc_count += 1;

            let mut grads = tape.backward(loss)?;
            let grad_by_name: HashMap<String, Tensor> = param_ids
                .into_iter()
                .map(|(name, id)| {
                    let g = grads.take(id).expect("parameter gradient");
                    (name, g)
                })
                .collect();

            adam.t += 1;
            let adam_ref = &mut adam;
            model.visit_mut("", &mut |name, t, kind| {
                if kind != ParamKind::Trainable {
                    return;
                }
                let grad = grad_by_name
                    .get(&name)
                    .expect("forward visited every trainable parameter");
                adam_ref.step(&name, t, grad, lr);
                if name.ends_with(RELU_SCALE_SUFFIX) {
                    for v in t.data_mut() {
                        *v = v.max(RELU_SCALE_MIN);
                    }
                }
            });
            model.apply_stat_updates(&stat_updates)?;

            log.steps.push(StepRecord {
                epoch,
                step: global_step,
                loss: loss_val,
                lr,
            });
            global_step += 1;
        }

        let val = evaluate(&model, val_set, cfg.batch_size, false).map_err(|e| match e {
            Error::Numerical(m) => {
                let tail: Vec<f64> = log.steps.iter().rev().take(5).map(|s| s.loss).collect();
                Error::Numerical(format!(
                    "{m} during validation after epoch {epoch} (lr {:.2e}; recent losses {tail:?})",
                    lr_at(global_step.saturating_sub(1), warmup_steps, total_steps, cfg.lr)
                ))
            }
            other => other,
        })?;
        if val.dsc > best_dsc {
            best_dsc = val.dsc;
            best_epoch = epoch;
            best_model = model.clone();
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_dsc: if epoch_dsc_count > 0 {
                epoch_dsc_sum / epoch_dsc_count as f64
            } else {
                0.0
            },
            val,
            best_dsc_so_far: best_dsc,
            wall_ms: epoch_start.elapsed().as_millis(),
        });
    }

    log.best_epoch = best_epoch;
    log.best_dsc = best_dsc;
    Ok(TrainOutcome {
        best_model,
        final_model: model,
        log,
    })
}

/// Eval-mode metrics over a dataset, averaged per sample.
pub fn evaluate(
    model: &Model,
    samples: &[SamplePair],
    batch_size: usize,
    keep_per_sample: bool,
) -> Result<MetricReport> {
    let mut per_sample = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&SamplePair> = chunk.iter().collect();
        let (images, _) = stack_batch(&batch)?;
        let probs = model.infer(&images)?;
        let shape = probs.shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        for (i, s) in chunk.iter().enumerate() {
            let offset = i * h * w;
            let p = Tensor::new(
                vec![1, h, w],
                probs.data()[offset..offset + h * w].to_vec(),
            )?;
            per_sample.push(sample_metrics(&s.id, &p, &s.mask)?);
        }
    }
    Ok(MetricReport::from_samples(per_sample, keep_per_sample))
}

/// Probability map for one [1, H, W] image.
pub fn predict(model: &Model, image: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    let batched = image.reshaped(&[1, 1, shape[1], shape[2]])?;
    let probs = model.infer(&batched)?;
    probs.reshaped(&[1, shape[1], shape[2]])
}
