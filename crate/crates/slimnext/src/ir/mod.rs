//! Typed computation-graph IR for ConvNeXt-family models.
//!
//! Nodes are stored in topological order: node 0 reads the model input and
//! every later node reads the outputs of earlier nodes by id. Parameters
//! live in name-keyed stores on the model, fp32 tensors in `params` or
//! int8 tensors with quantization metadata in `quantized_params`, never
//! both. Layout is canonical NCHW; LayerNorm and Linear operate over the
//! channel axis internally, so the graph carries no permute nodes.

pub mod build;
pub mod forward;
pub mod serialize;

pub use build::{build_convnext, ConvNeXtConfig};
pub use serialize::{load, model_size_bytes, save};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        weight: String,
        bias: Option<String>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: Option<String>,
    },
    LayerNorm {
        features: usize,
        /// Divisor used for the mean/variance statistics. Freshly built
        /// models have `stat_features == features`; subnetwork extraction
        /// keeps the pre-extraction width here so the surviving channels
        /// see the same statistics the zeroed model computed.
        stat_features: usize,
        eps: f32,
        gamma: String,
        beta: String,
    },
    Gelu,
    GlobalAvgPool,
    ResidualAdd,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: usize,
    pub kind: NodeKind,
    /// Producer node ids. Empty only on node 0, which reads the model input.
    pub inputs: Vec<usize>,
}

impl LayerNode {
    /// Names of the parameters this node reads, weight first.
    pub fn param_refs(&self) -> Vec<&str> {
        match &self.kind {
            NodeKind::Conv2d { weight, bias, .. } | NodeKind::Linear { weight, bias, .. } => {
                let mut refs = vec![weight.as_str()];
                if let Some(b) = bias {
                    refs.push(b.as_str());
                }
                refs
            }
            NodeKind::LayerNorm { gamma, beta, .. } => vec![gamma.as_str(), beta.as_str()],
            _ => Vec::new(),
        }
    }
}

/// int8 storage for a quantized parameter plus its dequantization metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParam {
    pub values: Tensor,
    pub scale: f32,
    pub zero_point: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: String,
    pub num_classes: usize,
    /// (channels, height, width) of a single input image.
    pub input: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub nodes: Vec<LayerNode>,
    pub params: BTreeMap<String, Tensor>,
    pub quantized_params: BTreeMap<String, QuantizedParam>,
    pub metadata: ModelMeta,
}

impl Model {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::internal(format!("parameter {name} missing from the fp32 store")))
    }

    /// fp32 parameter lookup that refuses names moved to the int8 store.
    pub fn fp32_param(&self, name: &str) -> Result<&Tensor> {
        if self.quantized_params.contains_key(name) {
            return Err(Error::internal(format!(
                "parameter {name} is quantized where fp32 is required"
            )));
        }
        self.param(name)
    }

    /// Check every structural invariant: topological order, node arity,
    /// single terminal, resolvable and exclusive parameter references, and
    /// attribute/shape agreement.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::internal("model has no nodes"));
        }
        let (c, h, w) = self.metadata.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::internal("metadata input shape has a zero dimension"));
        }
        if self.metadata.num_classes == 0 {
            return Err(Error::internal("model declares zero classes"));
        }

        let mut consumers = vec![0usize; self.nodes.len()];
        let mut referenced: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::internal(format!("node at position {i} carries id {}", node.id)));
            }
            let arity = if matches!(node.kind, NodeKind::ResidualAdd) { 2 } else { 1 };
            if i == 0 {
                if !node.inputs.is_empty() || arity != 1 {
                    return Err(Error::internal("node 0 must read the model input alone"));
                }
            } else {
                if node.inputs.len() != arity {
                    return Err(Error::internal(format!(
                        "node {i} expects {arity} inputs but lists {}",
                        node.inputs.len()
                    )));
                }
                for &src in &node.inputs {
                    if src >= i {
                        return Err(Error::internal(format!(
                            "node {i} reads node {src}, which is not an earlier node"
                        )));
                    }
                    consumers[src] += 1;
                }
            }
            for name in node.param_refs() {
                if let Some(prev) = referenced.insert(name, i) {
                    return Err(Error::internal(format!(
                        "parameter {name} referenced by nodes {prev} and {i}"
                    )));
                }
            }
            self.check_node_params(node)?;
        }

        for (i, &n) in consumers.iter().enumerate() {
            if n == 0 && i + 1 != self.nodes.len() {
                return Err(Error::internal(format!("node {i} output is never consumed")));
            }
        }
        match &self.nodes[self.nodes.len() - 1].kind {
            NodeKind::Linear { out_features, .. } if *out_features != self.metadata.num_classes => {
                return Err(Error::internal(format!(
                    "terminal classifier width {out_features} does not match {} classes",
                    self.metadata.num_classes
                )));
            }
            NodeKind::Conv2d { out_channels, .. } if *out_channels != self.metadata.num_classes => {
                return Err(Error::internal(format!(
                    "terminal conv width {out_channels} does not match {} classes",
                    self.metadata.num_classes
                )));
            }
            _ => {}
        }

        let referenced: BTreeSet<&str> = referenced.keys().copied().collect();
        for name in self.params.keys() {
            if !referenced.contains(name.as_str()) {
                return Err(Error::internal(format!("parameter {name} is referenced by no node")));
            }
            if self.quantized_params.contains_key(name) {
                return Err(Error::internal(format!(
                    "parameter {name} appears in both the fp32 and int8 stores"
                )));
            }
        }
        for (name, q) in &self.quantized_params {
            if !referenced.contains(name.as_str()) {
                return Err(Error::internal(format!("parameter {name} is referenced by no node")));
            }
            if q.values.dtype() != DType::I8 {
                return Err(Error::internal(format!("quantized parameter {name} is not int8")));
            }
            if !q.scale.is_finite() || q.scale <= 0.0 {
                return Err(Error::internal(format!(
                    "quantized parameter {name} has invalid scale {}",
                    q.scale
                )));
            }
        }
        Ok(())
    }

    fn check_node_params(&self, node: &LayerNode) -> Result<()> {
        let id = node.id;
        match &node.kind {
            NodeKind::Conv2d {
                in_channels, out_channels, kernel, stride, groups, weight, bias, ..
            } => {
                if *groups == 0 || *stride == 0 || *kernel == 0 {
                    return Err(Error::internal(format!("node {id}: conv attributes must be positive")));
                }
                if in_channels % groups != 0 || out_channels % groups != 0 {
                    return Err(Error::internal(format!(
                        "node {id}: channels ({in_channels} in, {out_channels} out) not divisible by {groups} groups"
                    )));
                }
                let w = self.fp32_param(weight)?;
                let expect = [*out_channels, in_channels / groups, *kernel, *kernel];
                if w.shape() != expect {
                    return Err(Error::internal(format!(
                        "node {id}: conv weight {weight} has shape {:?}, expected {expect:?}",
                        w.shape()
                    )));
                }
                if let Some(b) = bias {
                    let b = self.fp32_param(b)?;
                    if b.shape() != [*out_channels] {
                        return Err(Error::internal(format!(
                            "node {id}: conv bias has shape {:?}, expected [{out_channels}]",
                            b.shape()
                        )));
                    }
                }
            }
            NodeKind::Linear { in_features, out_features, weight, bias } => {
                let expect = [*out_features, *in_features];
                let shape = if let Some(q) = self.quantized_params.get(weight) {
                    q.values.shape()
                } else {
                    self.param(weight)?.shape()
                };
                if shape != expect {
                    return Err(Error::internal(format!(
                        "node {id}: linear weight {weight} has shape {shape:?}, expected {expect:?}"
                    )));
                }
                if let Some(b) = bias {
                    let b = self.fp32_param(b)?;
                    if b.shape() != [*out_features] {
                        return Err(Error::internal(format!(
                            "node {id}: linear bias has shape {:?}, expected [{out_features}]",
                            b.shape()
                        )));
                    }
                }
            }
            NodeKind::LayerNorm { features, stat_features, eps, gamma, beta } => {
                if stat_features < features {
                    return Err(Error::internal(format!(
                        "node {id}: stat_features {stat_features} below features {features}"
                    )));
                }
                if !(*eps > 0.0) {
                    return Err(Error::internal(format!("node {id}: eps must be positive")));
                }
                for name in [gamma, beta] {
                    let t = self.fp32_param(name)?;
                    if t.shape() != [*features] {
                        return Err(Error::internal(format!(
                            "node {id}: norm parameter {name} has shape {:?}, expected [{features}]",
                            t.shape()
                        )));
                    }
                }
            }
            NodeKind::Gelu | NodeKind::GlobalAvgPool | NodeKind::ResidualAdd | NodeKind::Flatten => {}
        }
        Ok(())
    }
}
