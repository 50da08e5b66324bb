//! Pixel-format conversion, patch sampling and synthetic surface defects.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{blur_plane, ceil, exp, floor, gaussian_taps, sqrt};
use crate::tensor::{Image, Tensor};

/// 8-bit interleaved samples to an image, `v / 255`.
pub fn image_from_u8(height: usize, width: usize, channels: usize, samples: &[u8]) -> Result<Image> {
    let data = samples.iter().map(|&v| v as f64 / 255.0).collect();
    Image::new(Tensor::from_vec(height, width, channels, data)?)
}

/// 16-bit interleaved samples to an image, `v / 65535`.
pub fn image_from_u16(height: usize, width: usize, channels: usize, samples: &[u16]) -> Result<Image> {
    let data = samples.iter().map(|&v| v as f64 / 65535.0).collect();
    Image::new(Tensor::from_vec(height, width, channels, data)?)
}

/// Channel average; single-channel images are returned unchanged.
pub fn to_grayscale(image: &Image) -> Image {
    Image::new(image.channel_mean()).expect("mean of valid channels stays valid")
}

/// Top-left corners of `count` uniformly placed `patch_size` windows.
pub fn patch_corners(
    height: usize,
    width: usize,
    patch_size: usize,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if patch_size == 0 || patch_size > height || patch_size > width {
        return Err(Error::arg(format!(
            "patch size {patch_size} does not fit a {height}x{width} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..count)
        .map(|_| {
            (
                rng.random_range(0..=height - patch_size),
                rng.random_range(0..=width - patch_size),
            )
        })
        .collect())
}

pub fn sample_patches(image: &Image, patch_size: usize, count: usize, rng_seed: u64) -> Result<Vec<Image>> {
    patch_corners(image.height(), image.width(), patch_size, count, rng_seed)?
        .into_iter()
        .map(|(top, left)| image.crop(top, left, patch_size))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    Blob,
    BrightnessPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDefectSpec {
    pub kind: DefectKind,
    pub intensity: f64,
    pub size_px: usize,
    pub seed: u64,
}

impl SyntheticDefectSpec {
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::arg(format!("defect intensity {} outside [0, 1]", self.intensity)));
        }
        if self.size_px == 0 || self.size_px >= height.min(width) {
            return Err(Error::arg(format!(
                "defect size {} must be in [1, {})",
                self.size_px,
                height.min(width)
            )));
        }
        Ok(())
    }
}

/// Smallest profile value kept in the defect support.
const SUPPORT_FLOOR: f64 = 1e-3;

/// Insert one defect into `base`. Returns the defective image and a binary
/// single-channel mask of the defect support.
///
/// The defect shifts intensities by `intensity * profile` with a polarity
/// drawn from the seed; where clipping would cancel the change the polarity
/// flips, so for `intensity > 0` the image differs from `base` exactly on the
/// mask.
pub fn gen_synthetic_pair(base: &Image, spec: &SyntheticDefectSpec) -> Result<(Image, Image)> {
    let (h, w, c) = base.shape();
    spec.validate_for(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let polarity = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let profile = match spec.kind {
        DefectKind::Scratch => scratch_profile(h, w, spec.size_px, &mut rng),
        DefectKind::Blob => blob_profile(h, w, spec.size_px, &mut rng),
        DefectKind::BrightnessPatch => patch_profile(h, w, spec.size_px, &mut rng),
    };

    let mut defective = base.tensor().clone();
    let mut mask = Tensor::zeros(h, w, 1);
    for (i, &p) in profile.iter().enumerate() {
        if p < SUPPORT_FLOOR {
            continue;
        }
        mask.data_mut()[i] = 1.0;
        let delta = spec.intensity * p;
        for v in &mut defective.data_mut()[i * c..(i + 1) * c] {
            let pushed = (*v + polarity * delta).clamp(0.0, 1.0);
            *v = if pushed == *v {
                (*v - polarity * delta).clamp(0.0, 1.0)
            } else {
                pushed
            };
        }
    }
    Ok((Image::new(defective)?, Image::new(mask)?))
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    sqrt(qx * qx + qy * qy)
}

/// Anti-aliased random polyline, 1–3 px wide, spanning about `size` px.
fn scratch_profile(h: usize, w: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let segments = rng.random_range(2..=4usize);
    let width = rng.random_range(1.0..=3.0);
    let seg_len = size as f64 / segments as f64;
    let (maxx, maxy) = ((w - 1) as f64, (h - 1) as f64);
    let mut pts = Vec::with_capacity(segments + 1);
    let mut p = (rng.random_range(0.0..=maxx), rng.random_range(0.0..=maxy));
    let mut angle = rng.random_range(0.0..2.0 * PI);
    pts.push(p);
    for _ in 0..segments {
        angle += rng.random_range(-PI / 6.0..=PI / 6.0);
        let mut next = (p.0 + seg_len * libm::cos(angle), p.1 + seg_len * libm::sin(angle));
        if next.0 < 0.0 || next.0 > maxx || next.1 < 0.0 || next.1 > maxy {
            // bounce back into the frame
            angle += PI;
            next = (p.0 + seg_len * libm::cos(angle), p.1 + seg_len * libm::sin(angle));
            next = (next.0.clamp(0.0, maxx), next.1.clamp(0.0, maxy));
        }
        pts.push(next);
        p = next;
    }
    let reach = width / 2.0 + 0.5;
    let mut out = alloc::vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = pts
                .windows(2)
                .map(|s| segment_distance(x as f64, y as f64, s[0], s[1]))
                .fold(f64::INFINITY, f64::min);
            out[y * w + x] = (reach - d).clamp(0.0, 1.0);
        }
    }
    out
}

/// Isotropic Gaussian bell of diameter `size`, cut off at its radius.
fn blob_profile(h: usize, w: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let radius = size as f64 / 2.0;
    let sigma = (size as f64 / 4.0).max(0.5);
    let margin = floor(radius) as usize;
    let cy = rng.random_range(margin..=h - 1 - margin) as f64;
    let cx = rng.random_range(margin..=w - 1 - margin) as f64;
    let mut out = alloc::vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let d2 = dy * dy + dx * dx;
            if d2 <= radius * radius {
                out[y * w + x] = exp(-d2 / (2.0 * sigma * sigma));
            }
        }
    }
    out
}

/// Axis-aligned rectangle, `size` wide and between `size / 2` and `size` tall.
fn patch_profile(h: usize, w: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rw = size;
    let rh = rng.random_range((ceil(size as f64 / 2.0) as usize).max(1)..=size);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let mut out = alloc::vec![0.0; h * w];
    for y in top..top + rh {
        for x in left..left + rw {
            out[y * w + x] = 1.0;
        }
    }
    out
}

/// Peak of the uniform noise fed to the grain blur.
const GRAIN_AMPLITUDE: f64 = 0.15;
const GRAIN_SIGMA: f64 = 1.0;

/// A clean surface: two oriented sinusoidal gratings around mid gray plus a
/// fine blurred-noise grain. The seed moves the grating phases and draws the
/// grain, so all instances share one texture family but no two are equal.
pub fn procedural_texture(height: usize, width: usize, channels: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves = [
        (0.12, 8.0, PI / 6.0, rng.random_range(0.0..2.0 * PI)),
        (0.08, 13.0, 5.0 * PI / 9.0, rng.random_range(0.0..2.0 * PI)),
    ];
    let raw: Vec<f64> = (0..height * width)
        .map(|_| GRAIN_AMPLITUDE * rng.random_range(-1.0..1.0))
        .collect();
    let radius = (ceil(3.0 * GRAIN_SIGMA) as usize).min(height.min(width).saturating_sub(1));
    let mut grain = alloc::vec![0.0; height * width];
    blur_plane(&raw, height, width, &gaussian_taps(GRAIN_SIGMA, radius), &mut grain);
    Image::clamped(Tensor::from_fn(height, width, channels, |y, x, _| {
        let mut v = 0.5 + grain[y * width + x];
        for (amp, period, theta, phase) in waves {
            let t = x as f64 * libm::cos(theta) + y as f64 * libm::sin(theta);
            v += amp * libm::sin(2.0 * PI * t / period + phase);
        }
        v
    }))
}
