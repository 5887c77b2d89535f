//! Pixel-grid value types shared across the pipeline.
//!
//! Images are `H x W x 3` with channel values in `[0, 1]`; mask stacks are
//! `k x H x W` with the same range. Everything is `f64` — the gradient
//! checks in the test suites need the headroom.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

/// An RGB image with unit-range channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    /// `H x W x 3`, entries in `[0, 1]`.
    pub pixels: Array3<f64>,
}

impl RasterImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::shape("H x W x 3", format!("{:?}", pixels.shape())));
        }
        if pixels.is_empty() {
            return Err(Error::invalid("image must be non-empty"));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image entries must be finite and in [0, 1]"));
        }
        Ok(Self { pixels })
    }

    /// A solid-color image.
    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        let pixels = Array3::from_shape_fn((height, width, 3), |(_, _, c)| color[c]);
        Self::new(pixels)
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Population variance over all `H*W*3` entries.
    pub fn pixel_variance(&self) -> f64 {
        pixel_variance(self.pixels.iter().copied()).expect("image is non-empty")
    }
}

/// A stack of `k` alpha masks rasterized on the image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMaskStack {
    /// `k x H x W`, entries in `[0, 1]`.
    pub alphas: Array3<f64>,
}

impl AlphaMaskStack {
    pub fn new(alphas: Array3<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("mask stack must be non-empty"));
        }
        if !alphas.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("mask entries must be finite and in [0, 1]"));
        }
        Ok(Self { alphas })
    }

    pub fn k(&self) -> usize {
        self.alphas.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.alphas.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.alphas.shape()[2]
    }

    /// View of mask plane `k`.
    pub fn plane(&self, k: usize) -> ArrayView2<'_, f64> {
        self.alphas.index_axis(ndarray::Axis(0), k)
    }

    /// Population variance over all `k*H*W` entries.
    pub fn pixel_variance(&self) -> f64 {
        pixel_variance(self.alphas.iter().copied()).expect("mask stack is non-empty")
    }
}

/// Population variance of a value stream. Errors on an empty stream.
pub fn pixel_variance(values: impl IntoIterator<Item = f64>) -> Result<f64> {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in values {
        n += 1;
        let delta = v - mean;
        mean += delta / n as f64;
        m2 += delta * (v - mean);
    }
    if n == 0 {
        return Err(Error::invalid("variance of an empty grid"));
    }
    Ok(m2 / n as f64)
}

/// Population variance of a 2-d plane.
pub fn plane_variance(plane: &ArrayView2<'_, f64>) -> Result<f64> {
    pixel_variance(plane.iter().copied())
}

/// Binary mask on the image grid.
pub type BinaryMask = Array2<bool>;
