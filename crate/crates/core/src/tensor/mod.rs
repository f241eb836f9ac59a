//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain value: a shape and a row-major buffer. Differentiable
//! computation happens on a [`Graph`], which records every operation applied
//! to its [`Var`] handles and replays them backwards in [`Graph::backward`].
//! A graph is built fresh for each forward pass and can be differentiated
//! exactly once.

mod graph;
mod kernels;

pub use graph::{Graph, Var};

use rand::Rng;

use crate::error::{Error, Result};

/// Fill value used for masked attention scores. Finite so that a fully
/// masked row softmaxes to a uniform distribution instead of NaN.
pub const MASK_VALUE: f64 = -1e9;

/// Default epsilon for [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| std * standard_normal(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean mask; `true` marks a blocked position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("mask", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: &[usize], value: bool) -> Self {
        Self {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// `[1, 1, len, len]` mask blocking every key after the query position.
    pub fn causal(len: usize) -> Self {
        let mut data = vec![false; len * len];
        for q in 0..len {
            for k in q + 1..len {
                data[q * len + k] = true;
            }
        }
        Self {
            shape: vec![1, 1, len, len],
            data,
        }
    }

    /// `[batch, 1, 1, len]` key-padding mask from a flat `[batch * len]` pad vector.
    pub fn key_padding(pad: &[bool], batch: usize, len: usize) -> Result<Self> {
        Self::new(vec![batch, 1, 1, len], pad.to_vec())
    }

    /// Elementwise OR with broadcasting.
    pub fn or(&self, other: &Mask) -> Result<Mask> {
        let shape = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::dim("mask or", &self.shape, &other.shape))?;
        let ia = broadcast_index_map(&self.shape, &shape);
        let ib = broadcast_index_map(&other.shape, &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&a, &b)| self.data[a] || other.data[b])
            .collect();
        Ok(Mask { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// Numpy-style broadcast of two shapes, aligned on trailing dimensions.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// shape `in_shape` that broadcasts to it.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let in_total: usize = in_shape.iter().product();
    if in_shape == out_shape {
        return (0..total).collect();
    }
    // Trailing-suffix broadcast (bias add) is the hot case.
    if out_shape.ends_with(in_shape) {
        return (0..total).map(|i| i % in_total.max(1)).collect();
    }
    let n = out_shape.len();
    let offset = n - in_shape.len();
    let mut in_strides = vec![0usize; n];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..n).rev() {
            idx[d] += 1;
            flat += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Box-Muller standard normal draw.
fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
