//! Base noise and the positive/negative residual masks that shape it.
//!
//! The training noise is built from a uniform base field `z` and two
//! single-channel maps refreshed from the current reconstructor:
//!
//! * `R_p`, the mean residual `|x_p - f(x_p)|` over anomalous samples,
//!   normalized to peak 1. Multiplying `z` by it concentrates noise where
//!   defects tend to appear.
//! * `R_n`, the mean residual over normal samples. The gate
//!   `1 - |z| * R_n` suppresses noise where normal images already deviate
//!   from their reconstruction.
//!
//! The applied noise is `z * (R_p + blend * (1 - R_p)) * gate`, which equals
//! `(blend * z + (1 - blend) * z * R_p) * gate`. With neutral masks
//! (`R_p = 1`, `R_n = 0`) it is exactly `z`.

use alloc::format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstructor::Reconstruct;
use crate::tensor::{shape_str, Image, Tensor};

/// Residual peaks at or below this leave `R_p` neutral.
pub const POSITIVE_PEAK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseField {
    pub data: Tensor,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMaskPair {
    pub positive: Tensor,
    pub negative: Tensor,
    pub updated_at_iteration: u64,
}

impl NoiseMaskPair {
    /// `R_p = 1`, `R_n = 0`: the composed noise equals the base noise.
    pub fn neutral(height: usize, width: usize) -> Self {
        NoiseMaskPair {
            positive: Tensor::filled(height, width, 1, 1.0),
            negative: Tensor::zeros(height, width, 1),
            updated_at_iteration: 0,
        }
    }

    pub fn is_neutral(&self) -> bool {
        self.positive.data().iter().all(|&v| v == 1.0) && self.negative.data().iter().all(|&v| v == 0.0)
    }

    pub fn height(&self) -> usize {
        self.positive.height()
    }

    pub fn width(&self) -> usize {
        self.positive.width()
    }

    fn check_field(&self, z: &Tensor) -> Result<()> {
        if z.height() != self.height() || z.width() != self.width() {
            return Err(Error::shape(
                format!("{}x{} noise", self.height(), self.width()),
                shape_str(z.shape()),
            ));
        }
        Ok(())
    }
}

/// I.i.d. uniform noise on `[-amplitude, amplitude]`.
pub fn sample_base_noise(
    (height, width, channels): (usize, usize, usize),
    amplitude: f64,
    seed: u64,
) -> Result<NoiseField> {
    if !(amplitude > 0.0) || !amplitude.is_finite() {
        return Err(Error::arg("noise amplitude must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Tensor::from_fn(height, width, channels, |_, _, _| {
        rng.random_range(-amplitude..=amplitude)
    });
    Ok(NoiseField { data, amplitude })
}

fn mean_residual<R: Reconstruct + ?Sized>(model: &R, images: &[Image]) -> Result<Tensor> {
    let first = &images[0];
    let mut acc = Tensor::zeros(first.height(), first.width(), 1);
    for x in images {
        first.check_same_shape(x)?;
        let recon = model.reconstruct(x)?;
        x.check_same_shape(&recon)?;
        let residual = Tensor::from_vec(
            x.height(),
            x.width(),
            x.channels(),
            x.data().iter().zip(recon.data()).map(|(a, b)| (a - b).abs()).collect(),
        )?
        .channel_mean();
        for (a, r) in acc.data_mut().iter_mut().zip(residual.data()) {
            *a += r;
        }
    }
    let n = images.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Rebuild both masks from the model's residuals on the given samples.
pub fn update_residual_maps<R: Reconstruct + ?Sized>(
    model: &R,
    normal_images: &[Image],
    anomalous_images: &[Image],
    iteration: u64,
) -> Result<NoiseMaskPair> {
    if normal_images.is_empty() {
        return Err(Error::arg("mask update needs at least one normal image"));
    }
    let (h, w) = (normal_images[0].height(), normal_images[0].width());
    if let Some(x) = anomalous_images.iter().find(|x| x.height() != h || x.width() != w) {
        return Err(Error::shape(format!("{h}x{w} anomalous sample"), shape_str(x.shape())));
    }

    let mut negative = mean_residual(model, normal_images)?;
    negative.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let positive = if anomalous_images.is_empty() {
        Tensor::filled(h, w, 1, 1.0)
    } else {
        let mut r = mean_residual(model, anomalous_images)?;
        let peak = r.max();
        if peak > POSITIVE_PEAK_FLOOR {
            r.data_mut().iter_mut().for_each(|v| *v = (*v / peak).clamp(0.0, 1.0));
            r
        } else {
            Tensor::filled(h, w, 1, 1.0)
        }
    };
    Ok(NoiseMaskPair {
        positive,
        negative,
        updated_at_iteration: iteration,
    })
}

/// `z * R_p`, with `R_p` broadcast over channels.
pub fn make_positive_noise(z: &NoiseField, masks: &NoiseMaskPair) -> Result<NoiseField> {
    masks.check_field(&z.data)?;
    let c = z.data.channels();
    let mut out = z.data.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(c).zip(masks.positive.data()) {
        px.iter_mut().for_each(|v| *v *= m);
    }
    Ok(NoiseField {
        data: out,
        amplitude: z.amplitude,
    })
}

/// `clamp(1 - |z| * R_n, 0, 1)`.
pub fn make_negative_gate(z: &NoiseField, masks: &NoiseMaskPair) -> Result<Tensor> {
    masks.check_field(&z.data)?;
    let c = z.data.channels();
    let mut gate = z.data.clone();
    for (px, &m) in gate.data_mut().chunks_exact_mut(c).zip(masks.negative.data()) {
        px.iter_mut().for_each(|v| *v = (1.0 - v.abs() * m).clamp(0.0, 1.0));
    }
    Ok(gate)
}

/// Noise actually injected during training.
pub fn compose_applied_noise(z: &NoiseField, masks: &NoiseMaskPair, blend: f64) -> Result<NoiseField> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::arg(format!("blend {blend} outside [0, 1]")));
    }
    let gate = make_negative_gate(z, masks)?;
    let c = z.data.channels();
    let mut out = z.data.clone();
    let rows = out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(gate.data().chunks_exact(c))
        .zip(masks.positive.data());
    for ((px, g), &rp) in rows {
        let weight = rp + blend * (1.0 - rp);
        for (v, gv) in px.iter_mut().zip(g) {
            *v = *v * weight * gv;
        }
    }
    Ok(NoiseField {
        data: out,
        amplitude: z.amplitude,
    })
}

/// `clip(x + z_hat, 0, 1)`.
pub fn apply_noise(x: &Image, z_hat: &NoiseField) -> Result<Image> {
    x.check_same_shape(&z_hat.data)?;
    let data = x
        .data()
        .iter()
        .zip(z_hat.data.data())
        .map(|(a, z)| (a + z).clamp(0.0, 1.0))
        .collect();
    Image::new(Tensor::from_vec(x.height(), x.width(), x.channels(), data)?)
}
