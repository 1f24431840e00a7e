//! Channel-major `f32` rasters and boolean masks used for images, normals,
//! disparities and masks on disk and in samples.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// `[C, H, W]` raster of `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "FloatMap data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn same_size(&self, other: &FloatMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Bilinear read of channel `c` at fractional `(x, y)`. `None` outside
    /// `[0, W-1] x [0, H-1]`.
    pub fn bilinear(&self, c: usize, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v = |yy, xx| self.at(c, yy, xx) as f64;
        Some((1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1)))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        assert_eq!(t.rank(), 3, "FloatMap::from_tensor expects [C,H,W]");
        Self::from_vec(
            t.dim(0),
            t.dim(1),
            t.dim(2),
            t.data().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// `[H, W]` boolean mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BoolMap {
    pub fn new(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BoolMap) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}
