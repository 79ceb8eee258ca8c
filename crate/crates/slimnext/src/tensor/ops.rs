//! Forward and backward kernels. Every kernel writes each output element
//! from exactly one task with a fixed inner summation order, so the
//! parallel and sequential paths produce bitwise-identical results.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum output elements before a kernel fans out to worker threads.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 4096;

#[cfg(feature = "parallel")]
fn should_par(n: usize) -> bool {
    n >= PARALLEL_THRESHOLD
}

// ── conv2d ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize, // input channels per group
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

fn conv_geom(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 {
        return Err(Error::shape(format!("conv2d input must be rank 4 (N,C,H,W), got {xs:?}")));
    }
    if ws.len() != 4 {
        return Err(Error::shape(format!("conv2d weight must be rank 4 (O,C/g,kh,kw), got {ws:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if groups == 0 || stride == 0 {
        return Err(Error::shape("conv2d stride and groups must be nonzero"));
    }
    if c % groups != 0 || o % groups != 0 {
        return Err(Error::shape(format!(
            "conv2d channels not divisible by groups: C={c}, O={o}, groups={groups}"
        )));
    }
    if cg != c / groups {
        return Err(Error::shape(format!(
            "conv2d weight axis 1 is {cg} but input has {c} channels over {groups} groups"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != o {
            return Err(Error::shape(format!(
                "conv2d bias has {} elements for {o} output channels",
                b.numel()
            )));
        }
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom { n, c, h, w, o, cg, kh, kw, stride, pad, groups, ho, wo })
}

/// One (n, o) output plane; `plane_idx = n * O + o`.
fn conv_plane(g: ConvGeom, x: &[f32], wt: &[f32], bias: Option<&[f32]>, plane_idx: usize, out: &mut [f32]) {
    let n = plane_idx / g.o;
    let o = plane_idx % g.o;
    let og = o / (g.o / g.groups);
    let c0 = og * g.cg;
    let b = bias.map_or(0.0, |b| b[o]);
    for oh in 0..g.ho {
        for ow in 0..g.wo {
            let mut acc = b;
            for ci in 0..g.cg {
                let xc = ((n * g.c + c0 + ci) * g.h) * g.w;
                let wc = ((o * g.cg + ci) * g.kh) * g.kw;
                for ki in 0..g.kh {
                    let ih = oh * g.stride + ki;
                    if ih < g.pad || ih >= g.h + g.pad {
                        continue;
                    }
                    let ih = ih - g.pad;
                    for kj in 0..g.kw {
                        let iw = ow * g.stride + kj;
                        if iw < g.pad || iw >= g.w + g.pad {
                            continue;
                        }
                        acc += x[xc + ih * g.w + (iw - g.pad)] * wt[wc + ki * g.kw + kj];
                    }
                }
            }
            out[oh * g.wo + ow] = acc;
        }
    }
}

/// Sequential and parallel kernel cores, exposed for the bench suite.
pub mod raw {
    use super::*;

    pub fn conv2d_seq(
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let g = conv_geom(x, weight, bias, stride, pad, groups)?;
        let xd = x.f32s()?;
        let wd = weight.f32s()?;
        let bd = bias.map(|b| b.f32s()).transpose()?;
        let plane = g.ho * g.wo;
        let mut out = vec![0f32; g.n * g.o * plane];
        if plane > 0 {
            for (idx, p) in out.chunks_mut(plane).enumerate() {
                conv_plane(g, xd, wd, bd, idx, p);
            }
        }
        Tensor::from_vec(&[g.n, g.o, g.ho, g.wo], out)
    }

    #[cfg(feature = "parallel")]
    pub fn conv2d_par(
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let g = conv_geom(x, weight, bias, stride, pad, groups)?;
        let xd = x.f32s()?;
        let wd = weight.f32s()?;
        let bd = bias.map(|b| b.f32s()).transpose()?;
        let plane = g.ho * g.wo;
        let mut out = vec![0f32; g.n * g.o * plane];
        if plane > 0 {
            out.par_chunks_mut(plane)
                .enumerate()
                .for_each(|(idx, p)| conv_plane(g, xd, wd, bd, idx, p));
        }
        Tensor::from_vec(&[g.n, g.o, g.ho, g.wo], out)
    }

    pub fn linear_seq(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (p, fin, fout) = super::linear_geom(x, weight, bias)?;
        let xd = x.f32s()?;
        let wd = weight.f32s()?;
        let bd = bias.map(|b| b.f32s()).transpose()?;
        let mut out = vec![0f32; p * fout];
        if fout > 0 {
            for (row, chunk) in out.chunks_mut(fout).enumerate() {
                super::linear_row(xd, wd, bd, fin, fout, row, chunk);
            }
        }
        let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
        shape.push(fout);
        Tensor::from_vec(&shape, out)
    }

    #[cfg(feature = "parallel")]
    pub fn linear_par(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (p, fin, fout) = super::linear_geom(x, weight, bias)?;
        let xd = x.f32s()?;
        let wd = weight.f32s()?;
        let bd = bias.map(|b| b.f32s()).transpose()?;
        let mut out = vec![0f32; p * fout];
        if fout > 0 {
            out.par_chunks_mut(fout)
                .enumerate()
                .for_each(|(row, chunk)| super::linear_row(xd, wd, bd, fin, fout, row, chunk));
        }
        let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
        shape.push(fout);
        Tensor::from_vec(&shape, out)
    }
}

/// 2-D convolution over (N,C,H,W) with square stride/padding and groups.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    #[cfg(feature = "parallel")]
    {
        let g = conv_geom(x, weight, bias, stride, pad, groups)?;
        if should_par(g.n * g.o * g.ho * g.wo) {
            return raw::conv2d_par(x, weight, bias, stride, pad, groups);
        }
    }
    raw::conv2d_seq(x, weight, bias, stride, pad, groups)
}

/// Gradients of conv2d wrt input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    stride: usize,
    pad: usize,
    groups: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let g = conv_geom(x, weight, None, stride, pad, groups)?;
    if dy.shape() != [g.n, g.o, g.ho, g.wo] {
        return Err(Error::shape(format!(
            "conv2d_backward dy shape {:?} does not match output {:?}",
            dy.shape(),
            [g.n, g.o, g.ho, g.wo]
        )));
    }
    let xd = x.f32s()?;
    let wd = weight.f32s()?;
    let dyd = dy.f32s()?;

    // dw: each task owns one output channel's filter block.
    let wblock = g.cg * g.kh * g.kw;
    let mut dw = vec![0f32; g.o * wblock];
    let dw_task = |o: usize, block: &mut [f32]| {
        let og = o / (g.o / g.groups);
        let c0 = og * g.cg;
        for n in 0..g.n {
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let gy = dyd[((n * g.o + o) * g.ho + oh) * g.wo + ow];
                    if gy == 0.0 {
                        continue;
                    }
                    for ci in 0..g.cg {
                        let xc = ((n * g.c + c0 + ci) * g.h) * g.w;
                        for ki in 0..g.kh {
                            let ih = oh * g.stride + ki;
                            if ih < g.pad || ih >= g.h + g.pad {
                                continue;
                            }
                            let ih = ih - g.pad;
                            for kj in 0..g.kw {
                                let iw = ow * g.stride + kj;
                                if iw < g.pad || iw >= g.w + g.pad {
                                    continue;
                                }
                                block[(ci * g.kh + ki) * g.kw + kj] +=
                                    gy * xd[xc + ih * g.w + (iw - g.pad)];
                            }
                        }
                    }
                }
            }
        }
    };
    run_chunked(&mut dw, wblock, dw_task);

    // dx: each task owns one (n, c) input plane.
    let xplane = g.h * g.w;
    let mut dx = vec![0f32; g.n * g.c * xplane];
    let opg = g.o / g.groups;
    let dx_task = |idx: usize, plane: &mut [f32]| {
        let n = idx / g.c;
        let c = idx % g.c;
        let og = c / g.cg;
        let ci = c % g.cg;
        for oi in 0..opg {
            let o = og * opg + oi;
            let wc = ((o * g.cg + ci) * g.kh) * g.kw;
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let gy = dyd[((n * g.o + o) * g.ho + oh) * g.wo + ow];
                    if gy == 0.0 {
                        continue;
                    }
                    for ki in 0..g.kh {
                        let ih = oh * g.stride + ki;
                        if ih < g.pad || ih >= g.h + g.pad {
                            continue;
                        }
                        let ih = ih - g.pad;
                        for kj in 0..g.kw {
                            let iw = ow * g.stride + kj;
                            if iw < g.pad || iw >= g.w + g.pad {
                                continue;
                            }
                            plane[ih * g.w + (iw - g.pad)] += gy * wd[wc + ki * g.kw + kj];
                        }
                    }
                }
            }
        }
    };
    run_chunked(&mut dx, xplane, dx_task);

    let db = if has_bias {
        let mut db = vec![0f32; g.o];
        for o in 0..g.o {
            let mut acc = 0f32;
            for n in 0..g.n {
                let base = ((n * g.o + o) * g.ho) * g.wo;
                for i in 0..g.ho * g.wo {
                    acc += dyd[base + i];
                }
            }
            db[o] = acc;
        }
        Some(Tensor::from_vec(&[g.o], db)?)
    } else {
        None
    };

    Ok((
        Tensor::from_vec(&[g.n, g.c, g.h, g.w], dx)?,
        Tensor::from_vec(&[g.o, g.cg, g.kh, g.kw], dw)?,
        db,
    ))
}

/// Apply `task` to every fixed-size chunk, in parallel when large enough.
fn run_chunked<F>(buf: &mut [f32], chunk: usize, task: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    if chunk == 0 || buf.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if should_par(buf.len()) {
            buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| task(i, c));
            return;
        }
    }
    for (i, c) in buf.chunks_mut(chunk).enumerate() {
        task(i, c);
    }
}

// ── linear ──────────────────────────────────────────────────────────────

fn linear_geom(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.is_empty() {
        return Err(Error::shape("linear input must have at least one axis"));
    }
    if ws.len() != 2 {
        return Err(Error::shape(format!("linear weight must be rank 2 (out,in), got {ws:?}")));
    }
    let fin = xs[xs.len() - 1];
    let (fout, wfin) = (ws[0], ws[1]);
    if wfin != fin {
        return Err(Error::shape(format!(
            "linear input has {fin} features on the last axis but weight expects {wfin}"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != fout {
            return Err(Error::shape(format!(
                "linear bias has {} elements for {fout} output features",
                b.numel()
            )));
        }
    }
    let p: usize = xs[..xs.len() - 1].iter().product();
    Ok((p, fin, fout))
}

fn linear_row(x: &[f32], w: &[f32], b: Option<&[f32]>, fin: usize, fout: usize, row: usize, out: &mut [f32]) {
    let xrow = &x[row * fin..(row + 1) * fin];
    for (f, slot) in out.iter_mut().enumerate().take(fout) {
        let wrow = &w[f * fin..(f + 1) * fin];
        let mut acc = b.map_or(0.0, |b| b[f]);
        for i in 0..fin {
            acc += xrow[i] * wrow[i];
        }
        *slot = acc;
    }
}

/// Affine map over the last axis, broadcast across all leading axes.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    #[cfg(feature = "parallel")]
    {
        let (p, _, fout) = linear_geom(x, weight, bias)?;
        if should_par(p * fout) {
            return raw::linear_par(x, weight, bias);
        }
    }
    raw::linear_seq(x, weight, bias)
}

/// Gradients of linear wrt input, weight, and bias.
pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (p, fin, fout) = linear_geom(x, weight, None)?;
    let expect: usize = p * fout;
    if dy.numel() != expect || *dy.shape().last().unwrap_or(&0) != fout {
        return Err(Error::shape(format!(
            "linear_backward dy shape {:?} does not match {} rows of {} features",
            dy.shape(),
            p,
            fout
        )));
    }
    let xd = x.f32s()?;
    let wd = weight.f32s()?;
    let dyd = dy.f32s()?;

    let mut dx = vec![0f32; p * fin];
    let dx_task = |row: usize, chunk: &mut [f32]| {
        let gyrow = &dyd[row * fout..(row + 1) * fout];
        for f in 0..fout {
            let gy = gyrow[f];
            if gy == 0.0 {
                continue;
            }
            let wrow = &wd[f * fin..(f + 1) * fin];
            for i in 0..fin {
                chunk[i] += gy * wrow[i];
            }
        }
    };
    run_chunked(&mut dx, fin, dx_task);

    let mut dw = vec![0f32; fout * fin];
    let dw_task = |f: usize, chunk: &mut [f32]| {
        for row in 0..p {
            let gy = dyd[row * fout + f];
            if gy == 0.0 {
                continue;
            }
            let xrow = &xd[row * fin..(row + 1) * fin];
            for i in 0..fin {
                chunk[i] += gy * xrow[i];
            }
        }
    };
    run_chunked(&mut dw, fin, dw_task);

    let mut db = vec![0f32; fout];
    for row in 0..p {
        for f in 0..fout {
            db[f] += dyd[row * fout + f];
        }
    }

    let mut xshape = x.shape().to_vec();
    let last = xshape.len() - 1;
    xshape[last] = fin;
    Ok((
        Tensor::from_vec(&xshape, dx)?,
        Tensor::from_vec(&[fout, fin], dw)?,
        Tensor::from_vec(&[fout], db)?,
    ))
}

// ── layer_norm ──────────────────────────────────────────────────────────

fn ln_geom(x: &Tensor, gamma: &Tensor, beta: &Tensor, stat_features: usize) -> Result<(usize, usize)> {
    let xs = x.shape();
    if xs.is_empty() {
        return Err(Error::shape("layer_norm input must have at least one axis"));
    }
    let f = xs[xs.len() - 1];
    if gamma.numel() != f || beta.numel() != f {
        return Err(Error::shape(format!(
            "layer_norm gamma/beta have {}/{} elements for {f} features",
            gamma.numel(),
            beta.numel()
        )));
    }
    if stat_features < f {
        return Err(Error::shape(format!(
            "layer_norm stat_features {stat_features} smaller than feature count {f}"
        )));
    }
    let p: usize = xs[..xs.len() - 1].iter().product();
    Ok((p, f))
}

/// Normalization over the last axis with affine gamma/beta.
///
/// `stat_features` is the divisor for the statistics; it exceeds the feature
/// count only on extracted models, where the removed channels (exact zeros)
/// must keep contributing to the mean and variance.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    stat_features: usize,
) -> Result<Tensor> {
    let (p, f) = ln_geom(x, gamma, beta, stat_features)?;
    let xd = x.f32s()?;
    let gd = gamma.f32s()?;
    let bd = beta.f32s()?;
    let sf = stat_features as f64;
    let mut out = vec![0f32; p * f];
    let task = |row: usize, chunk: &mut [f32]| {
        let xrow = &xd[row * f..(row + 1) * f];
        let mut s1 = 0f64;
        let mut s2 = 0f64;
        for &v in xrow {
            s1 += v as f64;
            s2 += (v as f64) * (v as f64);
        }
        let mean = s1 / sf;
        let var = (s2 / sf - mean * mean).max(0.0);
        let inv = 1.0 / (var + eps as f64).sqrt();
        for i in 0..f {
            chunk[i] = (gd[i] as f64 * (xrow[i] as f64 - mean) * inv + bd[i] as f64) as f32;
        }
    };
    run_chunked(&mut out, f, task);
    Tensor::from_vec(x.shape(), out)
}

/// Gradients of layer_norm wrt input, gamma, and beta.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f32,
    stat_features: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let beta_placeholder = Tensor::zeros(&[gamma.numel()]);
    let (p, f) = ln_geom(x, gamma, &beta_placeholder, stat_features)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape(format!(
            "layer_norm_backward dy shape {:?} does not match input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let xd = x.f32s()?;
    let gd = gamma.f32s()?;
    let dyd = dy.f32s()?;
    let sf = stat_features as f64;

    let mut dx = vec![0f32; p * f];
    let dx_task = |row: usize, chunk: &mut [f32]| {
        let xrow = &xd[row * f..(row + 1) * f];
        let dyrow = &dyd[row * f..(row + 1) * f];
        let mut s1 = 0f64;
        let mut s2 = 0f64;
        for &v in xrow {
            s1 += v as f64;
            s2 += (v as f64) * (v as f64);
        }
        let mean = s1 / sf;
        let var = (s2 / sf - mean * mean).max(0.0);
        let inv = 1.0 / (var + eps as f64).sqrt();
        let mut sum_g = 0f64;
        let mut sum_gx = 0f64;
        for i in 0..f {
            let g = dyrow[i] as f64 * gd[i] as f64;
            sum_g += g;
            sum_gx += g * (xrow[i] as f64 - mean);
        }
        for i in 0..f {
            let g = dyrow[i] as f64 * gd[i] as f64;
            let xc = xrow[i] as f64 - mean;
            chunk[i] = (inv * (g - sum_g / sf - xc * inv * inv * sum_gx / sf)) as f32;
        }
    };
    run_chunked(&mut dx, f, dx_task);

    let mut dgamma = vec![0f64; f];
    let mut dbeta = vec![0f64; f];
    for row in 0..p {
        let xrow = &xd[row * f..(row + 1) * f];
        let dyrow = &dyd[row * f..(row + 1) * f];
        let mut s1 = 0f64;
        let mut s2 = 0f64;
        for &v in xrow {
            s1 += v as f64;
            s2 += (v as f64) * (v as f64);
        }
        let mean = s1 / sf;
        let var = (s2 / sf - mean * mean).max(0.0);
        let inv = 1.0 / (var + eps as f64).sqrt();
        for i in 0..f {
            let xhat = (xrow[i] as f64 - mean) * inv;
            dgamma[i] += dyrow[i] as f64 * xhat;
            dbeta[i] += dyrow[i] as f64;
        }
    }

    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[f], dgamma.iter().map(|&v| v as f32).collect())?,
        Tensor::from_vec(&[f], dbeta.iter().map(|&v| v as f32).collect())?,
    ))
}

// ── elementwise and reductions ──────────────────────────────────────────

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Elementwise kernels chew through fixed blocks so the parallel split
/// stays coarse.
const ELEMWISE_BLOCK: usize = 1024;

/// GELU in its exact form, x * Phi(x) with Phi the standard normal CDF.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let xd = x.f32s()?;
    let mut out = vec![0f32; xd.len()];
    let task = |blk: usize, chunk: &mut [f32]| {
        let base = blk * ELEMWISE_BLOCK;
        for (j, slot) in chunk.iter_mut().enumerate() {
            let v = xd[base + j] as f64;
            *slot = (v * gauss_cdf(v)) as f32;
        }
    };
    run_chunked(&mut out, ELEMWISE_BLOCK, task);
    Tensor::from_vec(x.shape(), out)
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if dy.shape() != x.shape() {
        return Err(Error::shape("gelu_backward dy shape does not match input"));
    }
    let xd = x.f32s()?;
    let dyd = dy.f32s()?;
    let mut out = vec![0f32; xd.len()];
    let task = |blk: usize, chunk: &mut [f32]| {
        let base = blk * ELEMWISE_BLOCK;
        for (j, slot) in chunk.iter_mut().enumerate() {
            let v = xd[base + j] as f64;
            *slot = (dyd[base + j] as f64 * (gauss_cdf(v) + v * gauss_pdf(v))) as f32;
        }
    };
    run_chunked(&mut out, ELEMWISE_BLOCK, task);
    Tensor::from_vec(x.shape(), out)
}

/// Mean over the spatial axes: (N,C,H,W) -> (N,C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::shape(format!("global_avg_pool input must be rank 4, got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if h * w == 0 {
        return Err(Error::shape("global_avg_pool over empty spatial extent"));
    }
    let xd = x.f32s()?;
    let plane = h * w;
    let mut out = vec![0f32; n * c];
    for (i, slot) in out.iter_mut().enumerate() {
        let base = i * plane;
        let mut acc = 0f64;
        for j in 0..plane {
            acc += xd[base + j] as f64;
        }
        *slot = (acc / plane as f64) as f32;
    }
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avg_pool_backward(x_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    if dy.shape() != [n, c] {
        return Err(Error::shape("global_avg_pool_backward dy shape mismatch"));
    }
    let dyd = dy.f32s()?;
    let plane = h * w;
    let scale = 1.0 / plane as f32;
    let mut out = vec![0f32; n * c * plane];
    for i in 0..n * c {
        let g = dyd[i] * scale;
        for j in 0..plane {
            out[i * plane + j] = g;
        }
    }
    Tensor::from_vec(x_shape, out)
}

/// Elementwise sum of two identically shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "residual add over mismatched shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.f32s()?;
    let bd = b.f32s()?;
    let out = ad.iter().zip(bd).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape(), out)
}

/// Mean cross-entropy over (N,K) logits, stabilized by max subtraction.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let ls = logits.shape();
    if ls.len() != 2 {
        return Err(Error::shape(format!("cross_entropy logits must be rank 2, got {ls:?}")));
    }
    let (n, k) = (ls[0], ls[1]);
    if n == 0 {
        return Err(Error::shape("cross_entropy over an empty batch"));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let xd = logits.f32s()?;
    let mut total = 0f64;
    for (row, &label) in labels.iter().enumerate() {
        let r = &xd[row * k..(row + 1) * k];
        let m = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0f64;
        for &v in r {
            z += ((v - m) as f64).exp();
        }
        total += m as f64 + z.ln() - r[label] as f64;
    }
    Tensor::from_vec(&[], vec![(total / n as f64) as f32])
}

pub fn cross_entropy_backward(logits: &Tensor, labels: &[usize], upstream: f32) -> Result<Tensor> {
    let ls = logits.shape();
    let (n, k) = (ls[0], ls[1]);
    let xd = logits.f32s()?;
    let scale = upstream / n as f32;
    let mut out = vec![0f32; n * k];
    for (row, &label) in labels.iter().enumerate() {
        let r = &xd[row * k..(row + 1) * k];
        let m = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0f64;
        for &v in r {
            z += ((v - m) as f64).exp();
        }
        for i in 0..k {
            let soft = (((r[i] - m) as f64).exp() / z) as f32;
            let onehot = if i == label { 1.0 } else { 0.0 };
            out[row * k + i] = (soft - onehot) * scale;
        }
    }
    Tensor::from_vec(ls, out)
}

/// Scalar projection sum(x * weights); the loss head for gradient checks.
pub fn weighted_sum(x: &Tensor, weights: &[f32]) -> Result<Tensor> {
    if weights.len() != x.numel() {
        return Err(Error::shape(format!(
            "weighted_sum got {} weights for {} elements",
            weights.len(),
            x.numel()
        )));
    }
    let xd = x.f32s()?;
    let mut acc = 0f64;
    for i in 0..xd.len() {
        acc += xd[i] as f64 * weights[i] as f64;
    }
    Tensor::from_vec(&[], vec![acc as f32])
}

// ── layout shuffles ─────────────────────────────────────────────────────

/// (N,C,H,W) -> (N,H,W,C), materialized.
pub fn channels_last(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::shape(format!("channels_last input must be rank 4, got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let xd = x.f32s()?;
    let mut out = vec![0f32; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let src = ((ni * c + ci) * h + hi) * w;
                for wi in 0..w {
                    out[((ni * h + hi) * w + wi) * c + ci] = xd[src + wi];
                }
            }
        }
    }
    Tensor::from_vec(&[n, h, w, c], out)
}

/// (N,H,W,C) -> (N,C,H,W), materialized.
pub fn channels_first(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::shape(format!("channels_first input must be rank 4, got {xs:?}")));
    }
    let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let xd = x.f32s()?;
    let mut out = vec![0f32; xd.len()];
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let src = ((ni * h + hi) * w + wi) * c;
                for ci in 0..c {
                    out[((ni * c + ci) * h + hi) * w + wi] = xd[src + ci];
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}
