//! Hybrid sparse training over zero-invariant groups.
//!
//! The run warms up as plain AdamW, ranks every group once by saliency and
//! marks the lowest fraction redundant, then lets the two populations part
//! ways: important groups keep taking plain steps while redundant ones get
//! a penalty pushing them toward zero and are pinned at exact zero as soon
//! as a trial update falls out of their current half-space. A pinned group
//! never moves again; the last step pins whatever stragglers remain so the
//! requested count is met exactly.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ir::Model;
use crate::prune::pzig::PruneGroup;
use crate::tensor::optim::AdamW;
use crate::trainer::{loss_and_grads, run_loop, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Saliency {
    /// Group L2 norm. Correlates with group size: a 200-element trunk
    /// group outscores a 3-element hidden group at equal magnitudes.
    #[default]
    GroupL2,
    /// L2 divided by sqrt(len): per-element magnitude, which keeps wide
    /// trunk groups and narrow hidden groups comparable.
    GroupRms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DhspgConfig {
    pub target_group_sparsity: f64,
    /// None resolves to a quarter of the run's total steps.
    pub warmup_steps: Option<usize>,
    pub epsilon_projection: f32,
    pub lambda_penalty: f32,
    pub saliency: Saliency,
    pub train: TrainConfig,
}

impl Default for DhspgConfig {
    fn default() -> Self {
        DhspgConfig {
            target_group_sparsity: 0.0,
            warmup_steps: None,
            epsilon_projection: 0.0,
            lambda_penalty: 1e-2,
            saliency: Saliency::default(),
            train: TrainConfig::default(),
        }
    }
}

impl DhspgConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.target_group_sparsity) {
            return Err(Error::Usage(format!(
                "target group sparsity {} outside [0, 1]",
                self.target_group_sparsity
            )));
        }
        if !(0.0..1.0).contains(&self.epsilon_projection) {
            return Err(Error::Usage(format!(
                "epsilon_projection {} outside [0, 1)",
                self.epsilon_projection
            )));
        }
        if !(self.lambda_penalty.is_finite() && self.lambda_penalty >= 0.0) {
            return Err(Error::Usage(format!(
                "lambda_penalty {} is not a finite nonnegative value",
                self.lambda_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DhspgReport {
    pub train: TrainReport,
    pub total_groups: usize,
    pub warmup_steps: usize,
    /// group_ids marked redundant, ascending by saliency at selection.
    pub redundant: Vec<usize>,
    /// All-zero groups at the end; equals ceil(target * total_groups).
    pub zeroed: usize,
}

/// Half-space test: the trial point leaves the group's side of the plane
/// when its inner product with the current point drops under eps*|x|^2.
pub fn crosses_half_space(trial: &[f32], x: &[f32], epsilon: f32) -> bool {
    let mut dot = 0f64;
    let mut norm_sq = 0f64;
    for i in 0..x.len() {
        dot += trial[i] as f64 * x[i] as f64;
        norm_sq += x[i] as f64 * x[i] as f64;
    }
    dot < epsilon as f64 * norm_sq
}

type GroupOffsets = Vec<(String, Vec<usize>)>;

fn gather(model: &Model, offsets: &GroupOffsets) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for (param, offs) in offsets {
        let data = model.fp32_param(param)?.f32s()?;
        out.extend(offs.iter().map(|&i| data[i]));
    }
    Ok(out)
}

/// Exact zeros for the weights and a clean slate for their moments.
fn pin_at_zero(model: &mut Model, opt: &mut AdamW, offsets: &GroupOffsets) -> Result<()> {
    for (param, offs) in offsets {
        let tensor = model
            .params
            .get_mut(param)
            .ok_or_else(|| Error::internal(format!("parameter {param} missing")))?;
        let data = tensor.f32s_mut()?;
        for &i in offs {
            data[i] = 0.0;
        }
        opt.zero_state_at(param, offs);
    }
    Ok(())
}

/// The k lowest-saliency group indices, ties broken by group position.
fn select_redundant(
    model: &Model,
    flats: &[GroupOffsets],
    saliency: Saliency,
    k: usize,
) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(flats.len());
    for (gi, offsets) in flats.iter().enumerate() {
        let mut sq = 0f64;
        let mut len = 0usize;
        for (param, offs) in offsets {
            let data = model.fp32_param(param)?.f32s()?;
            for &i in offs {
                sq += data[i] as f64 * data[i] as f64;
            }
            len += offs.len();
        }
        let norm = sq.sqrt();
        let score = match saliency {
            Saliency::GroupL2 => norm,
            Saliency::GroupRms => norm / (len.max(1) as f64).sqrt(),
        };
        scored.push((score, gi));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored[..k].iter().map(|&(_, gi)| gi).collect())
}

pub fn dhspg_train(
    model: &mut Model,
    groups: &[PruneGroup],
    ds: &Dataset,
    cfg: &DhspgConfig,
) -> Result<DhspgReport> {
    cfg.validate()?;
    if !model.quantized_params.is_empty() {
        return Err(Error::Usage(
            "sparse training works on float models; quantize afterwards".into(),
        ));
    }
    if groups.is_empty() {
        eprintln!("warning: no prunable groups, leaving the model untouched");
        return Ok(DhspgReport {
            train: TrainReport { steps: 0, epoch_loss: Vec::new() },
            total_groups: 0,
            warmup_steps: 0,
            redundant: Vec::new(),
            zeroed: 0,
        });
    }
    if cfg.target_group_sparsity == 1.0 {
        eprintln!(
            "warning: target group sparsity 1.0 zeroes every prunable channel; \
             the model stays valid but degenerate"
        );
    }

    let k = (cfg.target_group_sparsity * groups.len() as f64).ceil() as usize;
    let total_steps = cfg.train.total_steps(ds.len());
    let warmup = cfg.warmup_steps.unwrap_or(total_steps / 4).min(total_steps);
    let flats: Vec<GroupOffsets> =
        groups.iter().map(|g| g.flat_offsets(model)).collect::<Result<_>>()?;

    let mut opt = cfg.train.optimizer();
    let mut redundant: Vec<usize> = Vec::new();
    let mut selected = false;
    let mut frozen = vec![false; groups.len()];

    let train = run_loop(model, ds, &cfg.train, |model, x, labels, step| {
        if !selected && step >= warmup {
            redundant = select_redundant(model, &flats, cfg.saliency, k)?;
            selected = true;
        }
        let (loss, mut grads) = loss_and_grads(model, x, labels)?;
        let mut pre: Vec<(usize, Vec<f32>)> = Vec::new();
        if selected {
            for &gi in &redundant {
                if frozen[gi] {
                    for (param, offs) in &flats[gi] {
                        if let Some(g) = grads.get_mut(param) {
                            for &i in offs {
                                g[i] = 0.0;
                            }
                        }
                    }
                } else {
                    for (param, offs) in &flats[gi] {
                        let w = model.fp32_param(param)?.f32s()?;
                        let g = grads
                            .entry(param.clone())
                            .or_insert_with(|| vec![0.0; w.len()]);
                        for &i in offs {
                            g[i] += cfg.lambda_penalty * w[i];
                        }
                    }
                    pre.push((gi, gather(model, &flats[gi])?));
                }
            }
        }
        opt.step(&mut model.params, &grads)?;
        if selected {
            for (gi, x_pre) in &pre {
                let trial = gather(model, &flats[*gi])?;
                if crosses_half_space(&trial, x_pre, cfg.epsilon_projection) {
                    pin_at_zero(model, &mut opt, &flats[*gi])?;
                    frozen[*gi] = true;
                }
            }
            if step + 1 == total_steps {
                for &gi in &redundant {
                    if !frozen[gi] {
                        pin_at_zero(model, &mut opt, &flats[gi])?;
                        frozen[gi] = true;
                    }
                }
            }
        }
        Ok(loss)
    })?;

    if !selected {
        eprintln!(
            "warning: warmup covered all {total_steps} steps; zeroing the selection \
             without hybrid training"
        );
        redundant = select_redundant(model, &flats, cfg.saliency, k)?;
        for &gi in &redundant {
            pin_at_zero(model, &mut opt, &flats[gi])?;
            frozen[gi] = true;
        }
    }

    let mut zeroed = 0;
    for g in groups {
        if g.is_zero(model)? {
            zeroed += 1;
        }
    }
    Ok(DhspgReport {
        train,
        total_groups: groups.len(),
        warmup_steps: warmup,
        redundant: redundant.iter().map(|&gi| groups[gi].group_id).collect(),
        zeroed,
    })
}
