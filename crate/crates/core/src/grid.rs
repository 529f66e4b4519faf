//! Dense H×W×C maps and 8-bit label maps.
//!
//! One [`Grid`] type carries images, logits, softmax outputs, feature maps and
//! scalar score maps; the channel count tells them apart.

use crate::error::{Error, Result};
use crate::tensorio::Tensor;

/// Label value marking pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Row-major `height × width × channels` real-valued map.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// H×W×3 image with values in [0, 1].
pub type Image = Grid;
/// Per-pixel class scores `y = F(x)`.
pub type LogitMap = Grid;
/// Per-pixel class probabilities.
pub type SoftmaxMap = Grid;
/// Per-pixel penultimate-layer activations.
pub type FeatureMap = Grid;

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} grid",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn same_plane(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stored as a float32 tensor of shape (H, W, C).
    pub fn to_tensor(&self) -> Tensor {
        let dims = vec![self.height as u32, self.width as u32, self.channels as u32];
        Tensor::from_f32(dims, self.data.iter().map(|&v| v as f32).collect())
            .expect("grid dimensions are consistent")
    }

    /// Accepts (H, W) or (H, W, C) float tensors.
    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let values = tensor.as_f32()?;
        let dims: Vec<usize> = tensor.dims().iter().map(|&d| d as usize).collect();
        let (h, w, c) = match dims.as_slice() {
            [h, w] => (*h, *w, 1),
            [h, w, c] => (*h, *w, *c),
            _ => {
                return Err(Error::ShapeMismatch(format!("expected a 2-d or 3-d tensor, got {dims:?}")))
            }
        };
        Self::from_vec(h, w, c, values.iter().map(|&v| v as f64).collect())
    }
}

/// Per-pixel 8-bit labels; [`IGNORE_LABEL`] marks void pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Predicted segmentation mask `m`.
pub type SegMask = LabelMap;

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_u8(vec![self.height as u32, self.width as u32], self.data.clone())
            .expect("label map dimensions are consistent")
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let values = tensor.as_u8()?;
        match tensor.dims() {
            [h, w] => Self::from_vec(*h as usize, *w as usize, values.to_vec()),
            dims => Err(Error::ShapeMismatch(format!("expected a 2-d label tensor, got {dims:?}"))),
        }
    }
}
