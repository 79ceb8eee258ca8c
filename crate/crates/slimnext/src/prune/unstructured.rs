//! Weight masking with independent fractions per layer family.
//!
//! Masks zero weights in place instead of removing them, so every metric
//! except accuracy and the non-zero count stays bitwise identical. Conv
//! weights and linear weights get their own fraction; biases and norm
//! parameters are never masked.

use std::collections::BTreeMap;
use std::fmt;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ir::{Model, NodeKind};
use crate::profile::{profile_with_batch, Convention, Profile, DEFAULT_EVAL_BATCH};
use crate::tensor::{seeded_rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMethod {
    L1,
    Random { seed: u64 },
}

impl fmt::Display for MaskMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskMethod::L1 => write!(f, "l1"),
            MaskMethod::Random { .. } => write!(f, "random"),
        }
    }
}

/// Binary masks, one per conv/linear weight tensor, with the settings
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: BTreeMap<String, Tensor>,
    pub method: MaskMethod,
    pub frac_linear: f64,
    pub frac_conv: f64,
}

impl MaskSet {
    pub fn zero_count(&self) -> u64 {
        self.masks
            .values()
            .map(|m| m.f32s().map(|d| d.iter().filter(|&&v| v == 0.0).count()).unwrap_or(0))
            .sum::<usize>() as u64
    }
}

fn checked_fraction(frac: f64, which: &str) -> Result<()> {
    if !(frac.is_finite() && (0.0..=1.0).contains(&frac)) {
        return Err(Error::Usage(format!("{which} fraction {frac} outside [0, 1]")));
    }
    Ok(())
}

/// Weight names paired with the fraction their layer family gets, in node
/// order. Quantized weights no longer live in the float table and are
/// skipped.
fn weight_fractions(model: &Model, frac_linear: f64, frac_conv: f64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for node in &model.nodes {
        let (weight, frac) = match &node.kind {
            NodeKind::Conv2d { weight, .. } => (weight, frac_conv),
            NodeKind::Linear { weight, .. } => (weight, frac_linear),
            _ => continue,
        };
        if model.params.contains_key(weight) {
            out.push((weight.clone(), frac));
        }
    }
    out
}

fn mask_tensors(
    model: &Model,
    frac_linear: f64,
    frac_conv: f64,
    mut pick: impl FnMut(&[f32], usize) -> Vec<usize>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut masks = BTreeMap::new();
    for (name, frac) in weight_fractions(model, frac_linear, frac_conv) {
        let tensor = model.fp32_param(&name)?;
        let data = tensor.f32s()?;
        let k = (frac * data.len() as f64).floor() as usize;
        let mut bits = vec![1.0f32; data.len()];
        for i in pick(data, k) {
            bits[i] = 0.0;
        }
        masks.insert(name, Tensor::from_vec(tensor.shape(), bits)?);
    }
    Ok(masks)
}

/// Masks the smallest-magnitude weights per tensor, ties broken by flat
/// index ascending.
pub fn l1_mask(model: &Model, frac_linear: f64, frac_conv: f64) -> Result<MaskSet> {
    checked_fraction(frac_linear, "linear")?;
    checked_fraction(frac_conv, "conv")?;
    let masks = mask_tensors(model, frac_linear, frac_conv, |data, k| {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b)));
        order.truncate(k);
        order
    })?;
    Ok(MaskSet { masks, method: MaskMethod::L1, frac_linear, frac_conv })
}

/// Same per-tensor zero counts as `l1_mask`, positions drawn uniformly
/// from a seeded generator.
pub fn random_mask(model: &Model, frac_linear: f64, frac_conv: f64, seed: u64) -> Result<MaskSet> {
    checked_fraction(frac_linear, "linear")?;
    checked_fraction(frac_conv, "conv")?;
    let mut rng = seeded_rng(seed);
    let masks = mask_tensors(model, frac_linear, frac_conv, |data, k| {
        rand::seq::index::sample(&mut rng, data.len(), k).iter().collect()
    })?;
    Ok(MaskSet { masks, method: MaskMethod::Random { seed }, frac_linear, frac_conv })
}

/// Elementwise multiply, in place. Shapes and the graph never change, so
/// applying a second time is a no-op.
pub fn apply_masks(model: &mut Model, masks: &MaskSet) -> Result<()> {
    for (name, mask) in &masks.masks {
        let tensor = model.params.get_mut(name).ok_or_else(|| {
            Error::Shape(format!("mask for {name} has no matching float parameter"))
        })?;
        if mask.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "mask for {name} has shape {:?} but the parameter is {:?}",
                mask.shape(),
                tensor.shape()
            )));
        }
        let bits = mask.f32s()?;
        let data = tensor.f32s_mut()?;
        for i in 0..data.len() {
            data[i] *= bits[i];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub frac_linear: f64,
    pub frac_conv: f64,
    pub profile: Profile,
}

/// Masks a fresh copy at every (linear, conv) fraction pair and profiles
/// it. Points are independent, so they run in parallel when the crate is
/// built with the parallel feature.
pub fn sweep(
    model: &Model,
    ds: &Dataset,
    fracs_linear: &[f64],
    fracs_conv: &[f64],
    method: MaskMethod,
) -> Result<Vec<SweepPoint>> {
    model.validate()?;
    if fracs_linear.is_empty() || fracs_conv.is_empty() {
        return Err(Error::Usage("sweep needs at least one fraction per axis".into()));
    }
    for &f in fracs_linear {
        checked_fraction(f, "linear")?;
    }
    for &f in fracs_conv {
        checked_fraction(f, "conv")?;
    }
    let (c, h, w) = model.metadata.input;
    let input_shape = [1usize, c, h, w];
    let mut pairs = Vec::with_capacity(fracs_linear.len() * fracs_conv.len());
    for &fl in fracs_linear {
        for &fc in fracs_conv {
            pairs.push((fl, fc));
        }
    }

    let run_one = |&(fl, fc): &(f64, f64)| -> Result<SweepPoint> {
        let mut copy = model.clone();
        let masks = match method {
            MaskMethod::L1 => l1_mask(&copy, fl, fc)?,
            MaskMethod::Random { seed } => random_mask(&copy, fl, fc, seed)?,
        };
        apply_masks(&mut copy, &masks)?;
        let profile =
            profile_with_batch(&copy, ds, &input_shape, Convention::Fp32Only, DEFAULT_EVAL_BATCH)?;
        Ok(SweepPoint { frac_linear: fl, frac_conv: fc, profile })
    };

    #[cfg(feature = "parallel")]
    return pairs.par_iter().map(run_one).collect();
    #[cfg(not(feature = "parallel"))]
    pairs.iter().map(run_one).collect()
}

/// Grid rows as CSV, the two swept fractions and the moving metrics first,
/// the invariant metrics after them for audit.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out =
        String::from("frac_linear,frac_conv,accuracy_pct,nonzero_params_m,size_bytes,params_m,macs_m\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.frac_linear,
            p.frac_conv,
            p.profile.accuracy_pct,
            p.profile.nonzero_params_m,
            p.profile.size_bytes,
            p.profile.params_m,
            p.profile.macs_m
        ));
    }
    out
}
