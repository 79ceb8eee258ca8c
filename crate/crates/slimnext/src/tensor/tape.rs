//! Reverse-mode autograd over a recorded tape. Nodes are appended in
//! execution order, so the tape is already topologically sorted and
//! backward is a single reverse sweep. First-order only.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Node {
    Leaf {
        requires_grad: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f32,
        stat_features: usize,
    },
    Gelu {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    ChannelsLast {
        x: usize,
    },
    ChannelsFirst {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    WeightedSum {
        x: usize,
        weights: Vec<f32>,
    },
    Reshape {
        x: usize,
        from: Vec<usize>,
    },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, node: Node, value: Tensor) -> Var {
        self.nodes.push(node);
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    /// Register a trainable leaf; backward fills its grad buffer.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node::Leaf { requires_grad: true }, value)
    }

    /// Register a constant leaf (e.g. the input batch).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node::Leaf { requires_grad: false }, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|b| &self.values[b.0]),
            stride,
            pad,
            groups,
        )?;
        Ok(self.push(
            Node::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), stride, pad, groups },
            out,
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(&self.values[x.0], &self.values[w.0], b.map(|b| &self.values[b.0]))?;
        Ok(self.push(Node::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, out))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        stat_features: usize,
    ) -> Result<Var> {
        let out = ops::layer_norm(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
            stat_features,
        )?;
        Ok(self.push(
            Node::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps, stat_features },
            out,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(&self.values[x.0])?;
        Ok(self.push(Node::Gelu { x: x.0 }, out))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(&self.values[x.0])?;
        Ok(self.push(Node::GlobalAvgPool { x: x.0 }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(&self.values[a.0], &self.values[b.0])?;
        Ok(self.push(Node::Add { a: a.0, b: b.0 }, out))
    }

    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let out = ops::channels_last(&self.values[x.0])?;
        Ok(self.push(Node::ChannelsLast { x: x.0 }, out))
    }

    pub fn channels_first(&mut self, x: Var) -> Result<Var> {
        let out = ops::channels_first(&self.values[x.0])?;
        Ok(self.push(Node::ChannelsFirst { x: x.0 }, out))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let out = ops::cross_entropy(&self.values[logits.0], labels)?;
        Ok(self.push(Node::CrossEntropy { logits: logits.0, labels: labels.to_vec() }, out))
    }

    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        let out = ops::weighted_sum(&self.values[x.0], weights)?;
        Ok(self.push(Node::WeightedSum { x: x.0, weights: weights.to_vec() }, out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.values[x.0].shape().to_vec();
        let out = self.values[x.0].reshaped(shape)?;
        Ok(self.push(Node::Reshape { x: x.0, from }, out))
    }

    /// Reverse sweep from a scalar loss. Gradients land on the grad buffers
    /// of every `leaf` registered with requires_grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let gy_t = Tensor::from_vec(self.values[id].shape(), gy)?;
            match &self.nodes[id] {
                Node::Leaf { requires_grad } => {
                    if *requires_grad {
                        let flat = gy_t.f32s()?.to_vec();
                        self.values[id].set_grad(flat)?;
                    }
                }
                Node::Conv2d { x, w, b, stride, pad, groups } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        &self.values[*x],
                        &self.values[*w],
                        b.is_some(),
                        *stride,
                        *pad,
                        *groups,
                        &gy_t,
                    )?;
                    accumulate(&mut grads[*x], &dx)?;
                    accumulate(&mut grads[*w], &dw)?;
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads[*b], &db)?;
                    }
                }
                Node::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        ops::linear_backward(&self.values[*x], &self.values[*w], &gy_t)?;
                    accumulate(&mut grads[*x], &dx)?;
                    accumulate(&mut grads[*w], &dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads[*b], &db)?;
                    }
                }
                Node::LayerNorm { x, gamma, beta, eps, stat_features } => {
                    let (dx, dgamma, dbeta) = ops::layer_norm_backward(
                        &self.values[*x],
                        &self.values[*gamma],
                        *eps,
                        *stat_features,
                        &gy_t,
                    )?;
                    accumulate(&mut grads[*x], &dx)?;
                    accumulate(&mut grads[*gamma], &dgamma)?;
                    accumulate(&mut grads[*beta], &dbeta)?;
                }
                Node::Gelu { x } => {
                    let dx = ops::gelu_backward(&self.values[*x], &gy_t)?;
                    accumulate(&mut grads[*x], &dx)?;
                }
                Node::GlobalAvgPool { x } => {
                    let dx = ops::global_avg_pool_backward(self.values[*x].shape(), &gy_t)?;
                    accumulate(&mut grads[*x], &dx)?;
                }
                Node::Add { a, b } => {
                    accumulate(&mut grads[*a], &gy_t)?;
                    accumulate(&mut grads[*b], &gy_t)?;
                }
                Node::ChannelsLast { x } => {
                    let dx = ops::channels_first(&gy_t)?;
                    accumulate(&mut grads[*x], &dx)?;
                }
                Node::ChannelsFirst { x } => {
                    let dx = ops::channels_last(&gy_t)?;
                    accumulate(&mut grads[*x], &dx)?;
                }
                Node::CrossEntropy { logits, labels } => {
                    let up = gy_t.f32s()?[0];
                    let dx = ops::cross_entropy_backward(&self.values[*logits], labels, up)?;
                    accumulate(&mut grads[*logits], &dx)?;
                }
                Node::WeightedSum { x, weights } => {
                    let up = gy_t.f32s()?[0];
                    let dx: Vec<f32> = weights.iter().map(|w| w * up).collect();
                    let dx = Tensor::from_vec(self.values[*x].shape(), dx)?;
                    accumulate(&mut grads[*x], &dx)?;
                }
                Node::Reshape { x, from } => {
                    let dx = gy_t.reshaped(from)?;
                    accumulate(&mut grads[*x], &dx)?;
                }
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after backward, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.values[v.0].grad()
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: &Tensor) -> Result<()> {
    let gd = g.f32s()?;
    match slot {
        Some(acc) => {
            if acc.len() != gd.len() {
                return Err(Error::internal("gradient accumulation length mismatch"));
            }
            for (a, b) in acc.iter_mut().zip(gd) {
                *a += b;
            }
        }
        None => *slot = Some(gd.to_vec()),
    }
    Ok(())
}
