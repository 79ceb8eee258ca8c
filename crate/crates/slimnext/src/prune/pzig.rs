//! Zero-invariant group partition.
//!
//! One PruneGroup per (prunable node group, channel index). A group lists
//! every parameter slice that must hit zero together for the channel to
//! drop out of the function the network computes: producing filters/rows
//! with their bias elements, the norm affine pair, and the input slices of
//! every consumer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ir::{Model, NodeKind};
use crate::prune::depgraph::{DependencyGraph, NodeGroup};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Slice {
    pub param: String,
    pub axis: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct PruneGroup {
    pub group_id: usize,
    pub node_group_id: usize,
    pub channel_index: usize,
    pub slices: Vec<Slice>,
}

/// Flat offsets of the elements with coordinate `index` on `axis`.
pub fn slice_offsets(shape: &[usize], axis: usize, index: usize) -> Result<Vec<usize>> {
    if axis >= shape.len() || index >= shape[axis] {
        return Err(Error::internal(format!(
            "slice axis {axis} index {index} out of bounds for shape {shape:?}"
        )));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut offsets = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = (o * shape[axis] + index) * inner;
        offsets.extend(base..base + inner);
    }
    Ok(offsets)
}

impl PruneGroup {
    /// Flat offsets per parameter, slices on the same tensor merged.
    pub fn flat_offsets(&self, model: &Model) -> Result<Vec<(String, Vec<usize>)>> {
        let mut merged: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for s in &self.slices {
            let shape = model.fp32_param(&s.param)?.shape().to_vec();
            merged
                .entry(s.param.as_str())
                .or_default()
                .extend(slice_offsets(&shape, s.axis, s.index)?);
        }
        Ok(merged.into_iter().map(|(name, v)| (name.to_string(), v)).collect())
    }

    /// Sets every slice of the group to exact zero.
    pub fn zero(&self, model: &mut Model) -> Result<()> {
        for s in &self.slices {
            let tensor = model
                .params
                .get_mut(&s.param)
                .ok_or_else(|| Error::internal(format!("parameter {} missing", s.param)))?;
            let shape = tensor.shape().to_vec();
            let offsets = slice_offsets(&shape, s.axis, s.index)?;
            let data = tensor.f32s_mut()?;
            for i in offsets {
                data[i] = 0.0;
            }
        }
        Ok(())
    }

    /// True when every element of every slice is exactly zero.
    pub fn is_zero(&self, model: &Model) -> Result<bool> {
        for s in &self.slices {
            let tensor = model.fp32_param(&s.param)?;
            let data = tensor.f32s()?;
            for i in slice_offsets(tensor.shape(), s.axis, s.index)? {
                if data[i] != 0.0 {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

fn merge_width(width: &mut Option<usize>, w: usize, group: usize) -> Result<()> {
    match *width {
        None => {
            *width = Some(w);
            Ok(())
        }
        Some(prev) if prev == w => Ok(()),
        Some(prev) => Err(Error::internal(format!(
            "node group {group} ties axes of width {prev} and {w}"
        ))),
    }
}

/// Width of the tied channel axis, cross-checked between every member and
/// consumer that declares one.
fn group_width(dg: &DependencyGraph, model: &Model, group: &NodeGroup) -> Result<usize> {
    let mut width = None;
    for &m in &group.members {
        match &model.nodes[m].kind {
            NodeKind::Conv2d { out_channels, .. } => merge_width(&mut width, *out_channels, group.id)?,
            NodeKind::Linear { out_features, .. } => merge_width(&mut width, *out_features, group.id)?,
            NodeKind::LayerNorm { features, .. } => merge_width(&mut width, *features, group.id)?,
            _ => {}
        }
    }
    for node in &model.nodes {
        if dg.group_feeding(model, node.id) != Some(group.id) {
            continue;
        }
        match &node.kind {
            NodeKind::Conv2d { groups: 1, in_channels, .. } => {
                merge_width(&mut width, *in_channels, group.id)?
            }
            NodeKind::Linear { in_features, .. } => merge_width(&mut width, *in_features, group.id)?,
            _ => {}
        }
    }
    width.ok_or_else(|| {
        Error::internal(format!("node group {} has no channel-bearing member", group.id))
    })
}

pub fn partition_pzigs(dg: &DependencyGraph, model: &Model) -> Result<Vec<PruneGroup>> {
    let mut out = Vec::new();
    for group in &dg.node_groups {
        if !group.prunable {
            continue;
        }
        let width = group_width(dg, model, group)?;

        // (param, axis) templates stamped out once per channel. Members
        // contribute their output axis, consumers their input axis; a
        // depthwise conv has no separate input axis to slice.
        let mut templates: Vec<(&str, usize)> = Vec::new();
        for &m in &group.members {
            match &model.nodes[m].kind {
                NodeKind::Conv2d { weight, bias, .. } | NodeKind::Linear { weight, bias, .. } => {
                    templates.push((weight, 0));
                    if let Some(b) = bias {
                        templates.push((b, 0));
                    }
                }
                NodeKind::LayerNorm { gamma, beta, .. } => {
                    templates.push((gamma, 0));
                    templates.push((beta, 0));
                }
                _ => {}
            }
        }
        for node in &model.nodes {
            if dg.group_feeding(model, node.id) != Some(group.id) {
                continue;
            }
            match &node.kind {
                NodeKind::Conv2d { groups: 1, weight, .. } => templates.push((weight, 1)),
                NodeKind::Linear { weight, .. } => templates.push((weight, 1)),
                _ => {}
            }
        }

        for channel in 0..width {
            let slices = templates
                .iter()
                .map(|&(param, axis)| Slice { param: param.to_string(), axis, index: channel })
                .collect();
            out.push(PruneGroup {
                group_id: out.len(),
                node_group_id: group.id,
                channel_index: channel,
                slices,
            });
        }
    }
    Ok(out)
}
