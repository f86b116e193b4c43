//! Dense row-major `f64` tensor.
//!
//! Four-dimensional activations use the `[batch, channels, height, width]`
//! layout throughout the crate. Attention maps and the stand-alone attention
//! API use the position-major `[height, width, channels]` layout.

use std::fmt;

use crate::error::{shape_err, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.dims)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "dims {:?} need {} values, got {}",
                dims,
                expected,
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(dims, |_| rng.normal() * std)
    }

    /// Samples i.i.d. entries uniformly from `[lo, hi)`.
    pub fn rand_uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(dims, |_| rng.uniform_range(lo, hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor with dims {:?}", self.dims));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.dims.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }

    /// Reads one element; panics on a malformed index.
    pub fn at(&self, index: &[usize]) -> f64 {
        match self.offset(index) {
            Some(off) => self.data[off],
            None => panic!("index {:?} out of bounds for {:?}", index, self.dims),
        }
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        match self.offset(index) {
            Some(off) => self.data[off] = value,
            None => panic!("index {:?} out of bounds for {:?}", index, self.dims),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Inner product of two equally-shaped tensors.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    /// Destructures a rank-4 shape.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.dims[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(shape_err!("expected rank-4 tensor, got {:?}", self.dims)),
        }
    }

    /// Destructures a rank-3 shape.
    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.dims[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(shape_err!("expected rank-3 tensor, got {:?}", self.dims)),
        }
    }

    /// Copies channels `range` of an `[N,C,H,W]` tensor.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if range.start > range.end || range.end > c {
            return Err(shape_err!("channel range {:?} outside 0..{}", range, c));
        }
        let plane = h * w;
        let width = range.end - range.start;
        let mut out = Vec::with_capacity(n * width * plane);
        for b in 0..n {
            let base = b * c * plane;
            out.extend_from_slice(&self.data[base + range.start * plane..base + range.end * plane]);
        }
        Tensor::new(vec![n, width, h, w], out)
    }

    /// Sample `b` of an `[N,C,H,W]` tensor as a `[H,W,C]` map.
    pub fn sample_to_hwc(&self, b: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if b >= n {
            return Err(shape_err!("sample {} outside batch of {}", b, n));
        }
        let plane = h * w;
        let src = &self.data[b * c * plane..(b + 1) * c * plane];
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                out[p * c + ch] = src[ch * plane + p];
            }
        }
        Tensor::new(vec![h, w, c], out)
    }

    /// Inverse of [`Tensor::sample_to_hwc`]: a `[H,W,C]` map as `[1,C,H,W]`.
    pub fn hwc_to_nchw(&self) -> Result<Tensor> {
        let [h, w, c] = self.dims3()?;
        let plane = h * w;
        let mut out = vec![0.0; c * plane];
        for p in 0..plane {
            for ch in 0..c {
                out[ch * plane + p] = self.data[p * c + ch];
            }
        }
        Tensor::new(vec![1, c, h, w], out)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack an empty list"))?;
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_dims(t)?;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(dims, data)
    }

    /// Sub-tensor `index` along the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Tensor> {
        let (&outer, rest) = self
            .dims
            .split_first()
            .ok_or_else(|| shape_err!("cannot index a rank-0 tensor"))?;
        if index >= outer {
            return Err(shape_err!("index {} outside leading axis {}", index, outer));
        }
        let stride: usize = rest.iter().product();
        Tensor::new(
            rest.to_vec(),
            self.data[index * stride..(index + 1) * stride].to_vec(),
        )
    }
}
