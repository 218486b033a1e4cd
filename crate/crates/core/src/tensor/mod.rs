//! Dense `[batch × length × dim]` tensors and a reverse-mode gradient tape.
//!
//! Every activation, weight and gradient in the toolkit is a [`SeqTensor`].
//! Weight matrices reuse the same three-axis layout: a `d_in × d_out`
//! projection is stored as `[1 × d_in × d_out]`, and a convolution kernel
//! with `k` taps as `[k × d_in × d_out]`.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use tape::{Mask, Tape, Var};

use crate::error::TensorError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
}

impl Shape {
    pub const fn new(batch: usize, len: usize, dim: usize) -> Self {
        Shape { batch, len, dim }
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.len * self.dim
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}×{}×{}]", self.batch, self.len, self.dim)
    }
}

/// Row-major `[batch × length × dim]` tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl SeqTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::dim(
                "new",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(SeqTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        SeqTensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        SeqTensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        SeqTensor {
            shape: Shape::new(1, 1, 1),
            data: vec![value],
        }
    }

    /// Builds a `[1 × rows × cols]` tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::dim("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        SeqTensor::new(Shape::new(1, rows.len(), cols), data)
    }

    /// `[1 × n × n]` identity.
    pub fn identity(n: usize) -> Self {
        let mut t = SeqTensor::zeros(Shape::new(1, n, n));
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn at(&self, b: usize, l: usize, d: usize) -> f64 {
        self.data[self.offset(b, l, d)]
    }

    pub fn set(&mut self, b: usize, l: usize, d: usize, value: f64) {
        let o = self.offset(b, l, d);
        self.data[o] = value;
    }

    fn offset(&self, b: usize, l: usize, d: usize) -> usize {
        debug_assert!(b < self.shape.batch && l < self.shape.len && d < self.shape.dim);
        (b * self.shape.len + l) * self.shape.dim + d
    }

    /// Row `l` of batch item `b`.
    pub fn row(&self, b: usize, l: usize) -> &[f64] {
        let o = self.offset(b, l, 0);
        &self.data[o..o + self.shape.dim]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        SeqTensor::new(shape, self.data)
    }

    pub fn max_abs_diff(&self, other: &SeqTensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies rows `start..start + len` of every batch item.
    pub fn slice_len(&self, start: usize, len: usize) -> Result<SeqTensor, TensorError> {
        let s = self.shape;
        if start + len > s.len {
            return Err(TensorError::dim(
                "slice_len",
                format!("rows {start}..{} of {s}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(s.batch * len * s.dim);
        for b in 0..s.batch {
            let o = (b * s.len + start) * s.dim;
            data.extend_from_slice(&self.data[o..o + len * s.dim]);
        }
        SeqTensor::new(Shape::new(s.batch, len, s.dim), data)
    }

    /// Stacks `[1 × L × D]` (or larger) tensors along the batch axis.
    pub fn stack_batch(parts: &[SeqTensor]) -> Result<SeqTensor, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::dim("stack_batch", "no parts"))?;
        let (len, dim) = (first.shape.len, first.shape.dim);
        let mut batch = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len != len || p.shape.dim != dim {
                return Err(TensorError::dim(
                    "stack_batch",
                    format!("{} vs {}", p.shape, first.shape),
                ));
            }
            batch += p.shape.batch;
            data.extend_from_slice(&p.data);
        }
        SeqTensor::new(Shape::new(batch, len, dim), data)
    }
}
