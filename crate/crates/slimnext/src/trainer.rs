//! Minibatch AdamW training over the autodiff tape.
//!
//! The sparse optimizer in `prune` reuses `run_loop` so that its batch
//! order, augmentation draws, and loss evaluation are the plain ones bit
//! for bit; it only swaps the parameter update.

use std::collections::BTreeMap;

use crate::data::{self, Dataset, NormalizeStats};
use crate::error::{Error, Result};
use crate::ir::Model;
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::tape::Tape;
use crate::tensor::{derived_rng, Tensor};

/// Epoch e shuffles with seed ^ e*SHUFFLE_MIX and draws augmentation from
/// chacha stream AUGMENT_STREAM + e, so the schedule is a pure function of
/// (seed, epoch).
const SHUFFLE_MIX: u64 = 0x9e37_79b9_7f4a_7c15;
const AUGMENT_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Usage(format!("learning rate {} is not positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Usage(format!(
                "weight decay {} is not a finite nonnegative value",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }

    /// Steps over a full run: epochs x ceil(samples / batch_size).
    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub epoch_loss: Vec<f32>,
}

/// Forward and backward on one normalized batch. Gradients come back keyed
/// like `model.params`; parameters the loss never touched are absent.
pub fn loss_and_grads(
    model: &Model,
    x: &Tensor,
    labels: &[u8],
) -> Result<(f32, BTreeMap<String, Vec<f32>>)> {
    let mut tape = Tape::new();
    let (logits, leaves) = model.taped_forward(&mut tape, x)?;
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let loss = tape.cross_entropy(logits, &targets)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).f32s()?[0];
    let mut grads = BTreeMap::new();
    for (name, var) in leaves {
        if let Some(g) = tape.grad(var) {
            grads.insert(name, g.to_vec());
        }
    }
    Ok((loss_value, grads))
}

/// Drives the epoch/shuffle/augment/normalize cadence and hands every
/// prepared batch to `step` along with the running step index.
pub(crate) fn run_loop(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut step: impl FnMut(&mut Model, &Tensor, &[u8], usize) -> Result<f32>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let stats = NormalizeStats::default();
    let mut steps = 0usize;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let shuffle_seed = cfg.seed ^ (epoch as u64).wrapping_mul(SHUFFLE_MIX);
        let mut aug_rng = derived_rng(cfg.seed, AUGMENT_STREAM + epoch as u64);
        let mut total = 0f64;
        let mut seen = 0usize;
        for batch in data::batches(ds, cfg.batch_size, shuffle_seed)? {
            let images = if cfg.augment {
                data::augment(&batch.images, &mut aug_rng)?
            } else {
                batch.images
            };
            let x = data::normalize(&images, &stats)?;
            total += step(model, &x, &batch.labels, steps)? as f64;
            steps += 1;
            seen += 1;
        }
        epoch_loss.push((total / seen as f64) as f32);
    }
    Ok(TrainReport { steps, epoch_loss })
}

/// Plain AdamW training.
pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut opt = cfg.optimizer();
    run_loop(model, ds, cfg, |model, x, labels, _| {
        let (loss, grads) = loss_and_grads(model, x, labels)?;
        opt.step(&mut model.params, &grads)?;
        Ok(loss)
    })
}
