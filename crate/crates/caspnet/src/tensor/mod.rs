//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! `GridTensor` is a plain value type (shape + flat data). Differentiable
//! programs are built on a [`Tape`]: every op records enough state to replay
//! adjoints, and [`Tape::backward`] walks the record in reverse accumulating
//! gradients into the leaves. Computation defaults to `f32`; everything is
//! generic over [`Element`] so gradient checks can run the identical code at
//! `f64`.

mod adam;
mod ops;
mod tape;

pub use adam::{adam_step_tensor, AdamParams, AdamState};
pub use ops::{
    batch_norm2d, bilinear_upsample2x, conv2d, conv_transpose2d, max_pool2d, softmax_channels,
    NormMode,
};
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// Scalar element type for tensors. `f32` for production, `f64` for
/// finite-difference gradient checks.
pub trait Element:
    num_traits::Float + Send + Sync + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Element type tag used by the binary container formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Result<Dtype> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::input(format!("unknown dtype code {other}"))),
        }
    }
}

/// Dense row-major tensor. Rank 0 is a scalar (one element), rank 3 is the
/// common `(channels, height, width)` layout, rank 4 stacks time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> GridTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(GridTensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        GridTensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        GridTensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        GridTensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        GridTensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single element of a rank-0 tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Dimensions of a rank-3 `(c, h, w)` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape(format!(
                "expected rank-3 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Dimensions of a rank-4 `(a, b, h, w)` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::shape(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn at3(&self, c: usize, h: usize, w: usize) -> T {
        let (_, hh, ww) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * hh + h) * ww + w]
    }

    pub fn set3(&mut self, c: usize, h: usize, w: usize, v: T) {
        let (_, hh, ww) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * hh + h) * ww + w] = v;
    }

    /// Copy of channels `[from, to)` of a rank-3 tensor.
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<GridTensor<T>> {
        let (c, h, w) = self.dims3()?;
        if from >= to || to > c {
            return Err(Error::shape(format!(
                "channel slice [{from}, {to}) out of range for {c} channels"
            )));
        }
        let plane = h * w;
        Ok(GridTensor {
            shape: vec![to - from, h, w],
            data: self.data[from * plane..to * plane].to_vec(),
        })
    }

    /// Stack equal-shaped rank-3 tensors into a rank-4 tensor.
    pub fn stack(steps: &[GridTensor<T>]) -> Result<GridTensor<T>> {
        if steps.is_empty() {
            return Err(Error::shape("cannot stack zero tensors".to_string()));
        }
        let first = steps[0].shape().to_vec();
        let mut data = Vec::with_capacity(steps.len() * steps[0].numel());
        for s in steps {
            if s.shape() != first.as_slice() {
                return Err(Error::shape(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    s.shape(),
                    first
                )));
            }
            data.extend_from_slice(s.data());
        }
        let mut shape = vec![steps.len()];
        shape.extend_from_slice(&first);
        GridTensor::new(shape, data)
    }

    /// Split a rank-4 tensor back into rank-3 slices along the first axis.
    pub fn unstack(&self) -> Result<Vec<GridTensor<T>>> {
        if self.shape.len() < 2 {
            return Err(Error::shape(format!(
                "unstack needs rank >= 2, got {:?}",
                self.shape
            )));
        }
        let n = self.shape[0];
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let step: usize = inner.iter().product();
        Ok((0..n)
            .map(|i| GridTensor {
                shape: inner.clone(),
                data: self.data[i * step..(i + 1) * step].to_vec(),
            })
            .collect())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> GridTensor<T> {
        GridTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert element type (used when loading checkpoints for gradient
    /// checks and when freezing f64 oracles into f32 fixtures).
    pub fn cast<U: Element>(&self) -> GridTensor<U> {
        GridTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}
