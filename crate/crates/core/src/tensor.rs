//! Channels-last `H x W x C` arrays.
//!
//! [`Tensor`] is the unconstrained carrier used for noise fields, residual
//! maps and intermediate activations. [`Image`] wraps a tensor and enforces
//! the image invariants: finite values in `[0, 1]`, at least 8x8 pixels and
//! one or three channels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted image side, enough for SSIM windowing and two pooling
/// levels.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels} = {} values", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Tensor {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(shape_str(self.shape()), shape_str(other.shape())))
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Average over channels, producing an `H x W x 1` tensor.
    pub fn channel_mean(&self) -> Tensor {
        if self.channels == 1 {
            return self.clone();
        }
        let c = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect();
        Tensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Copy out one channel as a contiguous `H x W` plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn set_plane(&mut self, c: usize, plane: &[f64]) {
        for (dst, &v) in self.data.iter_mut().skip(c).step_by(self.channels).zip(plane) {
            *dst = v;
        }
    }

    /// Copy the `size x size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::arg(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Tensor {
            height,
            width,
            channels: c,
            data,
        })
    }
}

pub(crate) fn shape_str((h, w, c): (usize, usize, usize)) -> alloc::string::String {
    format!("{h}x{w}x{c}")
}

/// A validated image: finite intensities in `[0, 1]`, sides of at least
/// [`MIN_IMAGE_SIDE`], one or three channels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Image(Tensor);

impl Image {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (h, w, c) = tensor.shape();
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::InvalidImage(format!(
                "{h}x{w} is smaller than the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidImage(format!("{c} channels, expected 1 or 3")));
        }
        if let Some(v) = tensor
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Image(tensor))
    }

    /// Build an image, clamping every value into `[0, 1]` first.
    pub fn clamped(mut tensor: Tensor) -> Result<Self> {
        if !tensor.is_finite() {
            return Err(Error::InvalidImage("non-finite intensity".into()));
        }
        tensor.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Image::new(tensor)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(Tensor::filled(height, width, channels, value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Image> {
        Image::new(self.0.crop(top, left, size, size)?)
    }
}

impl Deref for Image {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        &self.0
    }
}

impl<'de> Deserialize<'de> for Image {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let t = Tensor::deserialize(d)?;
        Image::new(t).map_err(serde::de::Error::custom)
    }
}
