//! Shared oracles for integration tests: an independent f64 reference
//! implementation of every op, and central finite differences through it
//! to validate the engine's analytic gradients.
#![allow(dead_code)]

pub mod grad_cases;

use slimnext::tensor::tape::{Tape, Var};
use slimnext::tensor::Tensor;

/// Step size for central differences.
pub const FD_H: f64 = 1e-3;
/// Guarded relative error bound the analytic gradient must meet.
pub const FD_TOL: f64 = 1e-3;

// ── f64 reference ops ───────────────────────────────────────────────────

/// Plain f64 tensor for the reference path.
#[derive(Debug, Clone)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn from_tensor(t: &Tensor) -> T64 {
        T64 {
            shape: t.shape().to_vec(),
            data: t.f32s().unwrap().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// erf by Maclaurin series (|x| <= 4), else +-1; max error ~1e-12, far
/// below the tolerances it backs, and independent of the libm the engine
/// links.
pub fn erf_series(x: f64) -> f64 {
    if x.abs() > 4.0 {
        return x.signum();
    }
    let mut term = x;
    let mut acc = x;
    for n in 1..80 {
        let nf = n as f64;
        term *= -x * x / nf;
        acc += term / (2.0 * nf + 1.0);
    }
    acc * 2.0 / std::f64::consts::PI.sqrt()
}

fn cdf64(x: f64) -> f64 {
    0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

pub fn conv2d64(x: &T64, w: &T64, b: Option<&T64>, stride: usize, pad: usize, groups: usize) -> T64 {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, cg, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(cg, c / groups);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0f64; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            let c0 = (oi / (o / groups)) * cg;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data[oi]);
                    for ci in 0..cg {
                        for ki in 0..kh {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                acc += x.data[((ni * c + c0 + ci) * h + ih as usize) * wd
                                    + iw as usize]
                                    * w.data[((oi * cg + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    T64 { shape: vec![n, o, ho, wo], data: out }
}

pub fn linear64(x: &T64, w: &T64, b: Option<&T64>) -> T64 {
    let fin = *x.shape.last().unwrap();
    let fout = w.shape[0];
    let p: usize = x.data.len() / fin.max(1);
    let mut out = vec![0f64; p * fout];
    for row in 0..p {
        for f in 0..fout {
            let mut acc = b.map_or(0.0, |b| b.data[f]);
            for i in 0..fin {
                acc += x.data[row * fin + i] * w.data[f * fin + i];
            }
            out[row * fout + f] = acc;
        }
    }
    let mut shape = x.shape[..x.shape.len() - 1].to_vec();
    shape.push(fout);
    T64 { shape, data: out }
}

pub fn layer_norm64(x: &T64, gamma: &T64, beta: &T64, eps: f64, stat_features: usize) -> T64 {
    let f = *x.shape.last().unwrap();
    let p = x.data.len() / f.max(1);
    let sf = stat_features as f64;
    let mut out = vec![0f64; x.data.len()];
    for row in 0..p {
        let xr = &x.data[row * f..(row + 1) * f];
        let s1: f64 = xr.iter().sum();
        let s2: f64 = xr.iter().map(|v| v * v).sum();
        let mean = s1 / sf;
        let var = (s2 / sf - mean * mean).max(0.0);
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..f {
            out[row * f + i] = gamma.data[i] * (xr[i] - mean) * inv + beta.data[i];
        }
    }
    T64 { shape: x.shape.clone(), data: out }
}

pub fn gelu64(x: &T64) -> T64 {
    T64 { shape: x.shape.clone(), data: x.data.iter().map(|&v| v * cdf64(v)).collect() }
}

pub fn global_avg_pool64(x: &T64) -> T64 {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let plane = h * w;
    let mut out = vec![0f64; n * c];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = x.data[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    T64 { shape: vec![n, c], data: out }
}

pub fn add64(a: &T64, b: &T64) -> T64 {
    assert_eq!(a.shape, b.shape);
    T64 {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

pub fn channels_last64(x: &T64) -> T64 {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = vec![0f64; x.data.len()];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[((ni * h + hi) * w + wi) * c + ci] =
                        x.data[((ni * c + ci) * h + hi) * w + wi];
                }
            }
        }
    }
    T64 { shape: vec![n, h, w, c], data: out }
}

pub fn channels_first64(x: &T64) -> T64 {
    let (n, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = vec![0f64; x.data.len()];
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    out[((ni * c + ci) * h + hi) * w + wi] =
                        x.data[((ni * h + hi) * w + wi) * c + ci];
                }
            }
        }
    }
    T64 { shape: vec![n, c, h, w], data: out }
}

pub fn cross_entropy64(logits: &T64, labels: &[usize]) -> f64 {
    let (n, k) = (logits.shape[0], logits.shape[1]);
    let mut total = 0f64;
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits.data[row * k..(row + 1) * k];
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = r.iter().map(|&v| (v - m).exp()).sum();
        total += m + z.ln() - r[label];
    }
    total / n as f64
}

pub fn weighted_sum64(x: &T64, weights: &[f32]) -> f64 {
    x.data.iter().zip(weights).map(|(v, &w)| v * w as f64).sum()
}

// ── finite differences ──────────────────────────────────────────────────

/// Check the tape gradient of `build_tape` against central finite
/// differences through the f64 reference loss `eval64`, for every element
/// of every parameter. Both closures must express the same computation.
/// Returns the worst guarded relative error seen.
pub fn check_gradients(
    params: &[Tensor],
    build_tape: &dyn Fn(&mut Tape, &[Var]) -> Var,
    eval64: &dyn Fn(&[T64]) -> f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build_tape(&mut tape, &vars);
    tape.backward(loss).expect("backward failed");
    let analytic: Vec<Vec<f32>> =
        vars.iter().map(|&v| tape.grad(v).expect("missing grad").to_vec()).collect();

    let base: Vec<T64> = params.iter().map(T64::from_tensor).collect();
    let mut worst = 0f64;
    for (pi, param) in params.iter().enumerate() {
        for i in 0..param.numel() {
            let mut plus = base.clone();
            plus[pi].data[i] += FD_H;
            let mut minus = base.clone();
            minus[pi].data[i] -= FD_H;
            let fd = (eval64(&plus) - eval64(&minus)) / (2.0 * FD_H);
            let a = analytic[pi][i] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(0.1);
            if rel > worst {
                worst = rel;
            }
            assert!(
                rel <= FD_TOL,
                "param {pi} element {i}: analytic {a}, finite-diff {fd}, rel err {rel}"
            );
        }
    }
    worst
}

/// Random +-1 projection weights for building a scalar loss from an output.
pub fn projection(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f32> {
    use rand::Rng;
    (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

// ── whole-model f64 replay ──────────────────────────────────────────────

/// Replay an fp32 model through the f64 reference ops, mirroring the
/// engine's node walk (including the channels-last detour for the
/// trailing-axis ops).
pub fn forward64(model: &slimnext::ir::Model, x: &Tensor) -> T64 {
    use slimnext::ir::NodeKind;
    assert!(model.quantized_params.is_empty(), "f64 replay covers fp32 models only");
    let p64 = |name: &str| T64::from_tensor(model.param(name).unwrap());
    let over_channels = |x: &T64, f: &dyn Fn(&T64) -> T64| -> T64 {
        if x.shape.len() == 4 {
            channels_first64(&f(&channels_last64(x)))
        } else {
            f(x)
        }
    };
    let input = T64::from_tensor(x);
    let mut outputs: Vec<T64> = Vec::new();
    for node in &model.nodes {
        let y = {
            let srcs: Vec<&T64> = if node.id == 0 {
                vec![&input]
            } else {
                node.inputs.iter().map(|&s| &outputs[s]).collect()
            };
            match &node.kind {
                NodeKind::Conv2d { stride, padding, groups, weight, bias, .. } => {
                    let w = p64(weight);
                    let b = bias.as_ref().map(|n| p64(n));
                    conv2d64(srcs[0], &w, b.as_ref(), *stride, *padding, *groups)
                }
                NodeKind::Linear { weight, bias, .. } => {
                    let w = p64(weight);
                    let b = bias.as_ref().map(|n| p64(n));
                    over_channels(srcs[0], &|v| linear64(v, &w, b.as_ref()))
                }
                NodeKind::LayerNorm { stat_features, eps, gamma, beta, .. } => {
                    let g = p64(gamma);
                    let bt = p64(beta);
                    let (eps, sf) = (*eps as f64, *stat_features);
                    over_channels(srcs[0], &|v| layer_norm64(v, &g, &bt, eps, sf))
                }
                NodeKind::Gelu => gelu64(srcs[0]),
                NodeKind::GlobalAvgPool => global_avg_pool64(srcs[0]),
                NodeKind::ResidualAdd => add64(srcs[0], srcs[1]),
                NodeKind::Flatten => {
                    let n = srcs[0].shape[0];
                    let numel: usize = srcs[0].shape.iter().product();
                    T64 { shape: vec![n, numel / n], data: srcs[0].data.clone() }
                }
            }
        };
        outputs.push(y);
    }
    outputs.pop().unwrap()
}
