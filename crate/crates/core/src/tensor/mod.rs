//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! All arithmetic runs in `f64`. Parameters that live inside a model are kept
//! exactly representable in `f32` (see [`Tensor::round_to_f32`]) so that the
//! 32-bit model file round-trips without loss.

mod kernels;
mod optim;
mod tape;

pub use optim::{sgdm_step, Sgdm};
pub use tape::{BatchStats, BnMode, ConvAttrs, PoolAttrs, Tape, Var};

use crate::error::{shape_err, Result};

/// Dense row-major n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} holds {n} elements but data has {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("full: non-positive extent")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("from_fn: non-positive extent")
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err(
                "set_grad",
                format!("gradient has {} elements, tensor has {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rounds every element to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Concatenates tensors along axis 1 (channels).
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        if first.rank() < 2 {
            return Err(shape_err("concat", format!("rank {} < 2", first.rank())));
        }
        let n = first.shape[0];
        let inner: usize = first.shape[2..].iter().product();
        let mut channels = 0;
        for p in parts {
            if p.rank() != first.rank() || p.shape[0] != n || p.shape[2..] != first.shape[2..] {
                return Err(shape_err(
                    "concat",
                    format!("input {:?} incompatible with {:?}", p.shape, first.shape),
                ));
            }
            channels += p.shape[1];
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for p in parts {
                let block = p.shape[1] * inner;
                data.extend_from_slice(&p.data[b * block..(b + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = channels;
        Tensor::new(shape, data)
    }

    /// Splits along axis 1 into consecutive chunks of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if self.rank() < 2 || sizes.iter().sum::<usize>() != self.shape[1] {
            return Err(shape_err(
                "split",
                format!("sizes {sizes:?} do not partition axis 1 of {:?}", self.shape),
            ));
        }
        let n = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            let mut data = Vec::with_capacity(n * s * inner);
            for b in 0..n {
                let off = (b * c + start) * inner;
                data.extend_from_slice(&self.data[off..off + s * inner]);
            }
            let mut shape = self.shape.clone();
            shape[1] = s;
            out.push(Tensor::new(shape, data)?);
            start += s;
        }
        Ok(out)
    }

    /// Keeps only `indices` along `axis`, in the given order.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(shape_err("select", format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(shape_err("select", format!("index {bad} out of range {extent}")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let off = (o * extent + i) * inner;
                data.extend_from_slice(&self.data[off..off + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Tensor::new(shape, data)
    }
}
