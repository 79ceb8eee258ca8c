//! The five evaluation metrics for any model: accuracy, serialized size,
//! parameter count, MAC count, and non-zero parameter count.

use crate::data::{batches, normalize, Dataset, NormalizeStats};
use crate::error::{Error, Result};
use crate::ir::{model_size_bytes, Model, NodeKind};
use serde::{Deserialize, Serialize};

/// Batch size `profile` evaluates with.
pub const DEFAULT_EVAL_BATCH: usize = 256;

/// Whether int8 parameters (and the layers that consume them) are counted.
/// Quantized weights leave the trainable count, so compression tables read
/// fp32_only; reports print both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Fp32Only,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub accuracy_pct: f64,
    pub size_bytes: u64,
    pub params_m: f64,
    pub macs_m: f64,
    pub nonzero_params_m: f64,
    pub counting_convention: Convention,
}

impl Profile {
    pub fn size_mb(&self) -> f64 {
        // MB means 10^6 bytes everywhere in this crate.
        self.size_bytes as f64 / 1e6
    }
}

pub fn count_params(model: &Model, convention: Convention) -> u64 {
    let fp32: u64 = model.params.values().map(|t| t.numel() as u64).sum();
    match convention {
        Convention::Fp32Only => fp32,
        Convention::All => {
            fp32 + model.quantized_params.values().map(|q| q.values.numel() as u64).sum::<u64>()
        }
    }
}

pub fn count_nonzero(model: &Model, convention: Convention) -> Result<u64> {
    let mut count = 0u64;
    for t in model.params.values() {
        count += t.f32s()?.iter().filter(|&&v| v != 0.0).count() as u64;
    }
    if convention == Convention::All {
        for q in model.quantized_params.values() {
            count += q.values.i8s()?.iter().filter(|&&v| v != 0).count() as u64;
        }
    }
    Ok(count)
}

/// Multiply-accumulate count for one inference at `input_shape`. Only conv
/// and linear nodes contribute; under fp32_only a linear whose weight has
/// been quantized contributes zero.
pub fn count_macs(model: &Model, input_shape: &[usize], convention: Convention) -> Result<u64> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(model.nodes.len());
    let mut macs = 0u64;
    for node in &model.nodes {
        let ins: Vec<&[usize]> = if node.id == 0 {
            vec![input_shape]
        } else {
            node.inputs.iter().map(|&s| shapes[s].as_slice()).collect()
        };
        let out = match &node.kind {
            NodeKind::Conv2d {
                in_channels, out_channels, kernel, stride, padding, groups, ..
            } => {
                let x = ins[0];
                if x.len() != 4 || x[1] != *in_channels {
                    return Err(Error::Shape(format!(
                        "node {}: conv over {in_channels} channels fed shape {x:?}",
                        node.id
                    )));
                }
                let span = |extent: usize| -> Result<usize> {
                    let padded = extent + 2 * padding;
                    if padded < *kernel {
                        return Err(Error::Shape(format!(
                            "node {}: kernel {kernel} exceeds padded extent {padded}",
                            node.id
                        )));
                    }
                    Ok((padded - kernel) / stride + 1)
                };
                let (h, w) = (span(x[2])?, span(x[3])?);
                macs += (x[0] * h * w * out_channels * (kernel * kernel * in_channels / groups))
                    as u64;
                vec![x[0], *out_channels, h, w]
            }
            NodeKind::Linear { in_features, out_features, weight, .. } => {
                let x = ins[0];
                let features = if x.len() == 4 { x[1] } else { *x.last().unwrap_or(&0) };
                if features != *in_features {
                    return Err(Error::Shape(format!(
                        "node {}: linear over {in_features} features fed shape {x:?}",
                        node.id
                    )));
                }
                // Extraction can leave a linear with zero features, so the
                // position count must not divide by the feature width.
                let positions: usize =
                    if x.len() == 4 { x[0] * x[2] * x[3] } else { x[..x.len() - 1].iter().product() };
                let counted = convention == Convention::All
                    || !model.quantized_params.contains_key(weight);
                if counted {
                    macs += (positions * in_features * out_features) as u64;
                }
                let mut out = x.to_vec();
                if x.len() == 4 {
                    out[1] = *out_features;
                } else {
                    *out.last_mut().unwrap() = *out_features;
                }
                out
            }
            NodeKind::LayerNorm { features, .. } => {
                let x = ins[0];
                let over = if x.len() == 4 { x[1] } else { *x.last().unwrap_or(&0) };
                if over != *features {
                    return Err(Error::Shape(format!(
                        "node {}: norm over {features} features fed shape {x:?}",
                        node.id
                    )));
                }
                x.to_vec()
            }
            NodeKind::Gelu => ins[0].to_vec(),
            NodeKind::GlobalAvgPool => {
                let x = ins[0];
                if x.len() != 4 {
                    return Err(Error::Shape(format!(
                        "node {}: global pool fed shape {x:?}",
                        node.id
                    )));
                }
                vec![x[0], x[1]]
            }
            NodeKind::ResidualAdd => {
                if ins[0] != ins[1] {
                    return Err(Error::Shape(format!(
                        "node {}: residual branches disagree: {:?} vs {:?}",
                        node.id, ins[0], ins[1]
                    )));
                }
                ins[0].to_vec()
            }
            NodeKind::Flatten => {
                let x = ins[0];
                vec![x[0], x.iter().product::<usize>() / x[0]]
            }
        };
        shapes.push(out);
    }
    Ok(macs)
}

/// Top-1 accuracy over the dataset, as a percentage. Ties go to the lowest
/// class index.
pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let stats = NormalizeStats::default();
    let num_classes = model.metadata.num_classes;
    let mut correct = 0u64;
    for batch in batches(ds, batch_size, 0)? {
        let x = normalize(&batch.images, &stats)?;
        let logits = model.forward(&x)?;
        let rows = logits.f32s()?;
        if logits.shape() != [batch.labels.len(), num_classes] {
            return Err(Error::Shape(format!(
                "classifier produced {:?}, expected [{}, {num_classes}]",
                logits.shape(),
                batch.labels.len()
            )));
        }
        for (i, &label) in batch.labels.iter().enumerate() {
            let row = &rows[i * num_classes..(i + 1) * num_classes];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == label as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 * 100.0 / ds.len() as f64)
}

pub fn profile_with_batch(
    model: &Model,
    ds: &Dataset,
    input_shape: &[usize],
    convention: Convention,
    batch_size: usize,
) -> Result<Profile> {
    Ok(Profile {
        accuracy_pct: evaluate(model, ds, batch_size)?,
        size_bytes: model_size_bytes(model)?,
        params_m: count_params(model, convention) as f64 / 1e6,
        macs_m: count_macs(model, input_shape, convention)? as f64 / 1e6,
        nonzero_params_m: count_nonzero(model, convention)? as f64 / 1e6,
        counting_convention: convention,
    })
}

/// Bundle all five metrics, evaluating at the default batch size.
pub fn profile(
    model: &Model,
    ds: &Dataset,
    input_shape: &[usize],
    convention: Convention,
) -> Result<Profile> {
    profile_with_batch(model, ds, input_shape, convention, DEFAULT_EVAL_BATCH)
}
