//! Dense row-major tensors and the scalar abstraction.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! in `f64` so finite differences have enough precision to be meaningful.

use crate::error::{Error, Result};
use rand::Rng;

/// Element dtype tag, also used as the on-disk code in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Dtype> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::data(format!("unknown dtype code {other}"))),
        }
    }
}

/// Floating-point element type usable everywhere in the crate.
pub trait Scalar: num_traits::Float + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Width of one element in the checkpoint encoding.
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Dense row-major tensor. Gradients live alongside the values so a
/// parameter can carry its accumulated gradient between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init via Box-Muller so the draw sequence only depends on the
    /// RNG stream, not on a distribution crate's internals.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(T::from_f64(r * theta.cos() * std));
            if data.len() < numel {
                data.push(T::from_f64(r * theta.sin() * std));
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Rows/cols view of a rank-1 or rank-2 tensor; rank-1 counts as one row.
    pub fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            r => Err(Error::shape(format!("expected rank 1 or 2, got rank {r}"))),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        let cols = *self.shape.last().unwrap();
        self.data[row * cols + col]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Allocates (or keeps) the gradient buffer and adds `g` into it.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor with {} elements",
                g.len(),
                self.data.len()
            )));
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst = *dst + *src;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            for v in g.iter_mut() {
                *v = T::zero();
            }
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| Scalar::to_f64(v)).collect()
    }
}
