//! Plain row-major float image and boolean mask buffers.

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `height × width × 3`, row-major.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, color: &Vec3) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(color.as_slice());
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidInput(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Vec3 {
        let i = 3 * (y * self.width + x);
        Vec3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    pub fn set(&mut self, x: usize, y: usize, c: &Vec3) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(c.as_slice());
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copy of `self` with pixels outside `mask` replaced by `background`.
    pub fn masked(&self, mask: &Mask, background: &Vec3) -> Result<RgbImage> {
        if mask.width != self.width || mask.height != self.height {
            return Err(Error::InvalidInput("mask and image dimensions differ".into()));
        }
        let mut out = self.clone();
        for (px, &keep) in out.data.chunks_exact_mut(3).zip(&mask.data) {
            if !keep {
                px.copy_from_slice(background.as_slice());
            }
        }
        Ok(out)
    }

    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(3).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![true; width * height] }
    }

    pub fn from_alpha(width: usize, height: usize, alpha: &[f64], threshold: f64) -> Self {
        Self { width, height, data: alpha.iter().map(|&a| a > threshold).collect() }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
