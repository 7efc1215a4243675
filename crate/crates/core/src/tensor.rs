//! Dense 4-D `f32` tensors in (batch, channel, height, width) order.

use std::fmt;

use crate::error::{config, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements in one (height, width) plane.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements in one sample (channels × plane).
    pub const fn sample(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.channels, self.height, self.width)
    }
}

/// Row-major tensor. Immutable once recorded on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f32) -> Self {
        Tensor {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
        }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((b * s.channels + c) * s.height + h) * s.width + w
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(b, c, h, w)]
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return config(format!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channels `[start, start + len)` of every sample.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if start + len > s.channels || len == 0 {
            return config(format!("channel slice [{start}, {}) out of range for {s}", start + len));
        }
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.batch * len * plane);
        for b in 0..s.batch {
            let from = (b * s.channels + start) * plane;
            out.extend_from_slice(&self.data[from..from + len * plane]);
        }
        Ok(Tensor::from_parts(s.with_channels(len), out))
    }

    /// Copies the given samples into a new batch.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape;
        let per = s.sample();
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= s.batch {
                return config(format!("batch index {i} out of range for {s}"));
            }
            out.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Ok(Tensor::from_parts(
            Shape {
                batch: indices.len(),
                ..s
            },
            out,
        ))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
