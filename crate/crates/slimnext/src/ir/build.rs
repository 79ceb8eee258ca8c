//! ConvNeXt graph construction.

use super::{LayerNode, Model, ModelMeta, NodeKind};
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Tensor};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const LN_EPS: f32 = 1e-6;
pub const INIT_SIGMA: f32 = 0.02;

/// Architecture hyperparameters for one ConvNeXt variant.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvNeXtConfig {
    pub name: String,
    pub depths: [usize; 4],
    pub widths: [usize; 4],
    pub num_classes: usize,
    /// (channels, height, width) of a single input image.
    pub input: (usize, usize, usize),
}

impl ConvNeXtConfig {
    pub fn tiny(num_classes: usize) -> Self {
        Self::preset("tiny", [3, 3, 9, 3], [96, 192, 384, 768], num_classes)
    }

    pub fn small(num_classes: usize) -> Self {
        Self::preset("small", [3, 3, 27, 3], [96, 192, 384, 768], num_classes)
    }

    pub fn base(num_classes: usize) -> Self {
        Self::preset("base", [3, 3, 27, 3], [128, 256, 512, 1024], num_classes)
    }

    pub fn large(num_classes: usize) -> Self {
        Self::preset("large", [3, 3, 27, 3], [192, 384, 768, 1536], num_classes)
    }

    /// Desk-scale variant for tests and pruning experiments.
    pub fn micro(num_classes: usize) -> Self {
        Self::preset("micro", [1, 1, 3, 1], [24, 48, 96, 192], num_classes)
    }

    fn preset(name: &str, depths: [usize; 4], widths: [usize; 4], num_classes: usize) -> Self {
        Self { name: name.into(), depths, widths, num_classes, input: (3, 32, 32) }
    }

    pub fn by_name(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(num_classes)),
            "small" => Ok(Self::small(num_classes)),
            "base" => Ok(Self::base(num_classes)),
            "large" => Ok(Self::large(num_classes)),
            "micro" => Ok(Self::micro(num_classes)),
            other => Err(Error::Usage(format!(
                "unknown config {other}; expected tiny, small, base, large, or micro"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Usage("num_classes must be at least 1".into()));
        }
        if self.depths.iter().any(|&d| d == 0) || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Usage("stage depths and widths must all be positive".into()));
        }
        let (c, h, w) = self.input;
        if c == 0 {
            return Err(Error::Usage("input channel count must be positive".into()));
        }
        for (dim, label) in [(h, "height"), (w, "width")] {
            if dim % 4 != 0 {
                return Err(Error::Usage(format!(
                    "input {label} {dim} is not divisible by the stem stride 4"
                )));
            }
            let mut cur = dim / 4;
            for stage in 1..4usize {
                if cur % 2 != 0 {
                    return Err(Error::Usage(format!(
                        "input {label} {dim} leaves an odd extent {cur} entering stage {stage}"
                    )));
                }
                cur /= 2;
            }
            if cur == 0 {
                return Err(Error::Usage(format!(
                    "input {label} {dim} collapses to zero before the final stage"
                )));
            }
        }
        Ok(())
    }
}

struct GraphBuilder {
    nodes: Vec<LayerNode>,
    params: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    fn push(&mut self, kind: NodeKind, inputs: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(LayerNode { id, kind, inputs });
        id
    }

    fn conv(
        &mut self,
        name: &str,
        input: Vec<usize>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> usize {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let wshape = [out_channels, in_channels / groups, kernel, kernel];
        self.params.insert(weight.clone(), Tensor::trunc_normal(&wshape, INIT_SIGMA, &mut self.rng));
        self.params.insert(bias.clone(), Tensor::zeros(&[out_channels]));
        self.push(
            NodeKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                groups,
                weight,
                bias: Some(bias),
            },
            input,
        )
    }

    fn norm(&mut self, name: &str, input: Vec<usize>, features: usize) -> usize {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        self.params.insert(gamma.clone(), Tensor::filled(&[features], 1.0));
        self.params.insert(beta.clone(), Tensor::zeros(&[features]));
        self.push(
            NodeKind::LayerNorm { features, stat_features: features, eps: LN_EPS, gamma, beta },
            input,
        )
    }

    fn linear(&mut self, name: &str, input: Vec<usize>, in_features: usize, out_features: usize) -> usize {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        self.params
            .insert(weight.clone(), Tensor::trunc_normal(&[out_features, in_features], INIT_SIGMA, &mut self.rng));
        self.params.insert(bias.clone(), Tensor::zeros(&[out_features]));
        self.push(NodeKind::Linear { in_features, out_features, weight, bias: Some(bias) }, input)
    }
}

/// Build a freshly initialized ConvNeXt model. The same seed always yields
/// the same parameter bytes.
pub fn build_convnext(cfg: &ConvNeXtConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut b = GraphBuilder { nodes: Vec::new(), params: BTreeMap::new(), rng: seeded_rng(seed) };

    let mut cur = b.conv("stem.conv", Vec::new(), cfg.input.0, cfg.widths[0], 4, 4, 0, 1);
    for s in 0..4 {
        let w = cfg.widths[s];
        if s > 0 {
            let prev = cfg.widths[s - 1];
            cur = b.norm(&format!("stages.{s}.downsample.norm"), vec![cur], prev);
            cur = b.conv(&format!("stages.{s}.downsample.conv"), vec![cur], prev, w, 2, 2, 0, 1);
        }
        for blk in 0..cfg.depths[s] {
            let name = format!("stages.{s}.blocks.{blk}");
            let entry = cur;
            cur = b.conv(&format!("{name}.dwconv"), vec![cur], w, w, 7, 1, 3, w);
            cur = b.norm(&format!("{name}.norm"), vec![cur], w);
            cur = b.linear(&format!("{name}.expand"), vec![cur], w, 4 * w);
            cur = b.push(NodeKind::Gelu, vec![cur]);
            cur = b.linear(&format!("{name}.project"), vec![cur], 4 * w, w);
            cur = b.push(NodeKind::ResidualAdd, vec![entry, cur]);
        }
    }
    cur = b.norm("head.norm", vec![cur], cfg.widths[3]);
    cur = b.push(NodeKind::GlobalAvgPool, vec![cur]);
    b.linear("head.fc", vec![cur], cfg.widths[3], cfg.num_classes);

    let model = Model {
        nodes: b.nodes,
        params: b.params,
        quantized_params: BTreeMap::new(),
        metadata: ModelMeta { config: cfg.name.clone(), num_classes: cfg.num_classes, input: cfg.input },
    };
    model.validate()?;
    Ok(model)
}
