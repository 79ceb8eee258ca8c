//! Graph execution: a plain inference walk and a taped walk for training.

use super::{LayerNode, Model, NodeKind};
use crate::error::{Error, Result};
use crate::quant::qlinear_forward;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ops, DType, Tensor};
use std::collections::BTreeMap;

fn over_channel_axis(x: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    // LayerNorm and Linear reduce over the trailing axis, so 4-d activations
    // visit them in channels-last form and come back to NCHW.
    if x.shape().len() == 4 {
        let moved = ops::channels_last(x)?;
        let y = f(&moved)?;
        ops::channels_first(&y)
    } else {
        f(x)
    }
}

fn taped_channel_axis(
    tape: &mut Tape,
    x: Var,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    if tape.value(x).shape().len() == 4 {
        let moved = tape.channels_last(x)?;
        let y = f(tape, moved)?;
        tape.channels_first(y)
    } else {
        f(tape, x)
    }
}

impl Model {
    /// Accept either a full image batch matching the metadata, or a 2-d
    /// feature batch when the graph starts with a non-conv node and the
    /// metadata declares a 1x1 spatial extent.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dtype() != DType::F32 {
            return Err(Error::Dtype("model input must be fp32".into()));
        }
        let (c, h, w) = self.metadata.input;
        let shape = x.shape();
        let ok = match shape.len() {
            4 => shape[0] > 0 && shape[1] == c && shape[2] == h && shape[3] == w,
            2 => {
                shape[0] > 0
                    && shape[1] == c
                    && (h, w) == (1, 1)
                    && !matches!(self.nodes[0].kind, NodeKind::Conv2d { .. })
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "input shape {shape:?} does not match the expected [N, {c}, {h}, {w}]"
            )));
        }
        Ok(())
    }

    /// Run the model on a batch and return the logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut last_use = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for &src in &node.inputs {
                last_use[src] = node.id;
            }
        }
        let mut outputs: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let y = {
                let srcs: Vec<&Tensor> = if node.id == 0 {
                    vec![x]
                } else {
                    node.inputs.iter().map(|&s| outputs[s].as_ref().unwrap()).collect()
                };
                self.eval_node(node, &srcs)?
            };
            outputs.push(Some(y));
            for &src in &node.inputs {
                if last_use[src] == node.id {
                    outputs[src] = None;
                }
            }
        }
        Ok(outputs.pop().unwrap().unwrap())
    }

    fn eval_node(&self, node: &LayerNode, srcs: &[&Tensor]) -> Result<Tensor> {
        match &node.kind {
            NodeKind::Conv2d { stride, padding, groups, weight, bias, .. } => {
                let w = self.fp32_param(weight)?;
                let b = bias.as_deref().map(|n| self.fp32_param(n)).transpose()?;
                ops::conv2d(srcs[0], w, b, *stride, *padding, *groups)
            }
            NodeKind::Linear { weight, bias, .. } => {
                let b = bias.as_deref().map(|n| self.fp32_param(n)).transpose()?;
                if let Some(q) = self.quantized_params.get(weight) {
                    over_channel_axis(srcs[0], |x| qlinear_forward(x, q, b))
                } else {
                    let w = self.fp32_param(weight)?;
                    over_channel_axis(srcs[0], |x| ops::linear(x, w, b))
                }
            }
            NodeKind::LayerNorm { stat_features, eps, gamma, beta, .. } => {
                let g = self.fp32_param(gamma)?;
                let bt = self.fp32_param(beta)?;
                let (eps, sf) = (*eps, *stat_features);
                over_channel_axis(srcs[0], |x| ops::layer_norm(x, g, bt, eps, sf))
            }
            NodeKind::Gelu => ops::gelu(srcs[0]),
            NodeKind::GlobalAvgPool => ops::global_avg_pool(srcs[0]),
            NodeKind::ResidualAdd => ops::add(srcs[0], srcs[1]),
            NodeKind::Flatten => {
                let n = srcs[0].shape()[0];
                srcs[0].reshaped(&[n, srcs[0].numel() / n])
            }
        }
    }

    /// Record the forward pass on a tape so gradients can flow to every
    /// fp32 parameter. Returns the logits variable and one leaf per
    /// parameter, keyed by name.
    pub fn taped_forward(&self, tape: &mut Tape, x: &Tensor) -> Result<(Var, BTreeMap<String, Var>)> {
        if !self.quantized_params.is_empty() {
            return Err(Error::Usage("quantized models do not support training passes".into()));
        }
        self.check_input(x)?;
        let mut leaves = BTreeMap::new();
        for (name, value) in &self.params {
            leaves.insert(name.clone(), tape.leaf(value.clone()));
        }
        let input = tape.constant(x.clone());
        let mut outputs: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let srcs: Vec<Var> = if node.id == 0 {
                vec![input]
            } else {
                node.inputs.iter().map(|&s| outputs[s]).collect()
            };
            let y = match &node.kind {
                NodeKind::Conv2d { stride, padding, groups, weight, bias, .. } => {
                    let w = leaves[weight];
                    let b = bias.as_ref().map(|n| leaves[n]);
                    tape.conv2d(srcs[0], w, b, *stride, *padding, *groups)?
                }
                NodeKind::Linear { weight, bias, .. } => {
                    let w = leaves[weight];
                    let b = bias.as_ref().map(|n| leaves[n]);
                    taped_channel_axis(tape, srcs[0], |t, v| t.linear(v, w, b))?
                }
                NodeKind::LayerNorm { stat_features, eps, gamma, beta, .. } => {
                    let g = leaves[gamma];
                    let bt = leaves[beta];
                    let (eps, sf) = (*eps, *stat_features);
                    taped_channel_axis(tape, srcs[0], |t, v| t.layer_norm(v, g, bt, eps, sf))?
                }
                NodeKind::Gelu => tape.gelu(srcs[0])?,
                NodeKind::GlobalAvgPool => tape.global_avg_pool(srcs[0])?,
                NodeKind::ResidualAdd => tape.add(srcs[0], srcs[1])?,
                NodeKind::Flatten => {
                    let shape = tape.value(srcs[0]).shape();
                    let (n, rest) = (shape[0], shape.iter().product::<usize>() / shape[0]);
                    tape.reshape(srcs[0], &[n, rest])?
                }
            };
            outputs.push(y);
        }
        Ok((*outputs.last().unwrap(), leaves))
    }
}
