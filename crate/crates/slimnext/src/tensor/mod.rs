//! Flat row-major tensors. f32 is the working dtype for everything touched
//! by training; int8 buffers exist only as quantized weight storage and
//! never carry gradients.

pub mod ops;
pub mod optim;
pub mod tape;

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    buf: Buffer,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            buf: Buffer::F32(vec![0.0; shape.iter().product()]),
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            buf: Buffer::F32(vec![value; shape.iter().product()]),
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "buffer holds {} elements but shape {:?} needs {}",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), buf: Buffer::F32(data), grad: None })
    }

    pub fn from_i8(shape: &[usize], data: Vec<i8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "int8 buffer holds {} elements but shape {:?} needs {}",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), buf: Buffer::I8(data), grad: None })
    }

    /// Truncated normal init: N(0, sigma^2) resampled until |x| <= 2*sigma.
    pub fn trunc_normal(shape: &[usize], sigma: f32, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let bound = 2.0 * sigma;
        for _ in 0..n {
            loop {
                let z: f32 = StandardNormal.sample(rng);
                let x = z * sigma;
                if x.abs() <= bound {
                    data.push(x);
                    break;
                }
            }
        }
        Tensor { shape: shape.to_vec(), buf: Buffer::F32(data), grad: None }
    }

    /// Uniform samples in [lo, hi), mostly for test inputs.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), buf: Buffer::F32(data), grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        match self.buf {
            Buffer::F32(_) => DType::F32,
            Buffer::I8(_) => DType::I8,
        }
    }

    pub fn f32s(&self) -> Result<&[f32]> {
        match &self.buf {
            Buffer::F32(d) => Ok(d),
            Buffer::I8(_) => Err(Error::Dtype("expected an f32 tensor, got int8".into())),
        }
    }

    pub fn f32s_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.buf {
            Buffer::F32(d) => Ok(d),
            Buffer::I8(_) => Err(Error::Dtype("expected an f32 tensor, got int8".into())),
        }
    }

    pub fn i8s(&self) -> Result<&[i8]> {
        match &self.buf {
            Buffer::I8(d) => Ok(d),
            Buffer::F32(_) => Err(Error::Dtype("expected an int8 tensor, got f32".into())),
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Attach a gradient buffer. int8 tensors never carry grad.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if self.dtype() == DType::I8 {
            return Err(Error::Dtype("int8 tensors never carry grad".into()));
        }
        if grad.len() != self.numel() {
            return Err(Error::shape(format!(
                "grad holds {} elements but tensor has {}",
                grad.len(),
                self.numel()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({})",
                self.shape,
                self.numel(),
                shape,
                n
            )));
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        out.grad = None;
        Ok(out)
    }
}

/// Deterministic RNG used everywhere a seed enters the system.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named purpose from a base seed, so
/// e.g. shuffling and augmentation never consume each other's draws.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
