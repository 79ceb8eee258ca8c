//! Structural removal of zeroed channel groups.
//!
//! Extraction never recomputes a number: it copies the surviving slices
//! and drops the dead ones. Zeroed channels contribute exact zeros to
//! every dot product and, through the kept `stat_features` divisor, to
//! every norm statistic, so the compact model reproduces the zeroed
//! model's outputs float for float.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{Model, NodeKind};
use crate::prune::pzig::{slice_offsets, PruneGroup};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WidthRow {
    pub node: usize,
    pub layer: String,
    pub width_before: usize,
    pub width_after: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractionSummary {
    pub removed_groups: usize,
    pub rows: Vec<WidthRow>,
}

impl ExtractionSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn to_table(&self) -> String {
        let layer_w = self
            .rows
            .iter()
            .map(|r| r.layer.len())
            .chain(["layer".len()])
            .max()
            .unwrap_or(5);
        let mut out = format!(
            "{:>4}  {:<layer_w$}  {:>6}  {:>5}\n",
            "node", "layer", "before", "after"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>4}  {:<layer_w$}  {:>6}  {:>5}\n",
                r.node, r.layer, r.width_before, r.width_after
            ));
        }
        out.push_str(&format!("removed groups: {}\n", self.removed_groups));
        out
    }
}

/// Copies `tensor` without the `drop`ped coordinates on `axis`.
fn remove_along(tensor: &Tensor, axis: usize, drop: &BTreeSet<usize>) -> Result<Tensor> {
    let shape = tensor.shape();
    let dim = shape[axis];
    if drop.iter().any(|&i| i >= dim) {
        return Err(Error::internal(format!(
            "removal index out of bounds for axis {axis} of {shape:?}"
        )));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let keep: Vec<usize> = (0..dim).filter(|i| !drop.contains(i)).collect();
    let src = tensor.f32s()?;
    let mut dst = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in &keep {
            let base = (o * dim + k) * inner;
            dst.extend_from_slice(&src[base..base + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Tensor::from_vec(&new_shape, dst)
}

/// Label a node by its leading parameter name with the role suffix cut.
fn node_label(kind: &NodeKind) -> Option<(String, usize)> {
    match kind {
        NodeKind::Conv2d { weight, out_channels, .. } => {
            Some((weight.trim_end_matches(".weight").to_string(), *out_channels))
        }
        NodeKind::Linear { weight, out_features, .. } => {
            Some((weight.trim_end_matches(".weight").to_string(), *out_features))
        }
        NodeKind::LayerNorm { gamma, features, .. } => {
            Some((gamma.trim_end_matches(".gamma").to_string(), *features))
        }
        _ => None,
    }
}

pub fn extract_subnetwork(
    model: &Model,
    groups: &[PruneGroup],
) -> Result<(Model, ExtractionSummary)> {
    model.validate()?;
    if !model.quantized_params.is_empty() {
        return Err(Error::Usage(
            "extraction works on float models; quantize after extracting".into(),
        ));
    }

    // A group leaves only as a whole. A dead weight row or column next to
    // live siblings means someone zeroed half a group by hand; removing it
    // would change the function, keeping it would leave dead channels, so
    // give up loudly. One exception: a row can go dark because departing
    // groups zeroed every column crossing it. Zeros that sit entirely
    // inside removable groups' slices are accounted for and not an error.
    let mut removable = Vec::new();
    let mut alive = Vec::new();
    for group in groups {
        if group.is_zero(model)? {
            removable.push(group);
        } else {
            alive.push(group);
        }
    }
    let mut explained: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for group in &removable {
        for s in &group.slices {
            let tensor = model.fp32_param(&s.param)?;
            explained
                .entry(s.param.as_str())
                .or_default()
                .extend(slice_offsets(tensor.shape(), s.axis, s.index)?);
        }
    }
    for group in &alive {
        for s in &group.slices {
            let tensor = model.fp32_param(&s.param)?;
            if tensor.shape().len() < 2 {
                continue;
            }
            let data = tensor.f32s()?;
            let offs = slice_offsets(tensor.shape(), s.axis, s.index)?;
            if !offs.iter().all(|&i| data[i] == 0.0) {
                continue;
            }
            let covered = explained
                .get(s.param.as_str())
                .is_some_and(|set| offs.iter().all(|i| set.contains(i)));
            if !covered {
                return Err(Error::Data(format!(
                    "group {} is partially zeroed ({} axis {} index {} is zero while the \
                     rest of the group is not); refusing to extract",
                    group.group_id, s.param, s.axis, s.index
                )));
            }
        }
    }

    let mut removals: BTreeMap<&str, BTreeMap<usize, BTreeSet<usize>>> = BTreeMap::new();
    for group in &removable {
        for s in &group.slices {
            removals
                .entry(s.param.as_str())
                .or_default()
                .entry(s.axis)
                .or_default()
                .insert(s.index);
        }
    }
    let dropped = |name: &str, axis: usize| -> usize {
        removals.get(name).and_then(|axes| axes.get(&axis)).map_or(0, BTreeSet::len)
    };

    let mut params = BTreeMap::new();
    for (name, tensor) in &model.params {
        let mut out = tensor.clone();
        if let Some(axes) = removals.get(name.as_str()) {
            for (&axis, drop) in axes {
                out = remove_along(&out, axis, drop)?;
            }
        }
        params.insert(name.clone(), out);
    }

    // A block can lose its entire hidden width and still compute the same
    // function (the empty expand/project pair degenerates to a bias add),
    // so zero-feature linears are legal. A trunk losing every channel
    // would empty convs and norms instead, and nothing downstream can run
    // on zero-channel feature maps, so that is refused.
    let mut nodes = model.nodes.clone();
    for node in &mut nodes {
        match &mut node.kind {
            NodeKind::Conv2d { in_channels, out_channels, groups, weight, .. } => {
                let depthwise = *groups > 1 && groups == in_channels && groups == out_channels;
                let r0 = dropped(weight, 0);
                *out_channels -= r0;
                if depthwise {
                    *in_channels -= r0;
                    *groups -= r0;
                } else {
                    *in_channels -= dropped(weight, 1);
                }
                if *out_channels == 0 || *in_channels == 0 {
                    return Err(Error::Data(format!(
                        "removal empties conv node {}; a stage trunk must keep at least \
                         one channel",
                        node.id
                    )));
                }
            }
            NodeKind::Linear { in_features, out_features, weight, .. } => {
                *out_features -= dropped(weight, 0);
                *in_features -= dropped(weight, 1);
            }
            NodeKind::LayerNorm { features, gamma, .. } => {
                *features -= dropped(gamma, 0);
                if *features == 0 {
                    return Err(Error::Data(format!(
                        "removal empties norm node {}; a stage trunk must keep at least \
                         one channel",
                        node.id
                    )));
                }
            }
            _ => {}
        }
    }

    let extracted = Model {
        nodes,
        params,
        quantized_params: BTreeMap::new(),
        metadata: model.metadata.clone(),
    };
    extracted.validate()?;

    let rows = model
        .nodes
        .iter()
        .zip(&extracted.nodes)
        .filter_map(|(before, after)| {
            let (layer, width_before) = node_label(&before.kind)?;
            let (_, width_after) = node_label(&after.kind)?;
            Some(WidthRow { node: before.id, layer, width_before, width_after })
        })
        .collect();
    Ok((extracted, ExtractionSummary { removed_groups: removable.len(), rows }))
}
