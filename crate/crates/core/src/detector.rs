//! Anomaly maps, pixel-level AUROC and threshold selection.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{blur_plane, ceil, gaussian_taps};
use crate::reconstructor::Reconstruct;
use crate::ssim::{ssim_map, SsimConfig};
use crate::tensor::{shape_str, Tensor};

pub const DEFAULT_SMOOTH_SIGMA: f64 = 1.0;
pub const DEFAULT_PERCENTILE: f64 = 99.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    /// `H x W x 1`, nonnegative.
    pub map: Tensor,
    pub image_score: f64,
    pub binary_mask: Option<Tensor>,
    pub threshold_used: Option<f64>,
}

impl AnomalyResult {
    pub fn from_map(map: Tensor) -> Self {
        let image_score = map.max();
        AnomalyResult {
            map,
            image_score,
            binary_mask: None,
            threshold_used: None,
        }
    }

    /// Mark pixels strictly above `threshold`.
    pub fn binarize(&mut self, threshold: f64) {
        self.binary_mask = Some(self.map.map(|v| if v > threshold { 1.0 } else { 0.0 }));
        self.threshold_used = Some(threshold);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// Channel-mean `|x - f(x)|`.
    #[default]
    AbsDiff,
    /// `(1 - SSIM(x, f(x))) / 2`.
    Ssim,
}

/// Isotropic Gaussian blur of a single-channel map with reflect padding.
/// The radius is `ceil(3 sigma)`, capped below the map side so the padding
/// reflects once and the blur conserves total mass.
pub fn gaussian_smooth(map: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::arg(format!("smoothing sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let (h, w, c) = map.shape();
    let radius = (ceil(3.0 * sigma) as usize).min(h.min(w).saturating_sub(1));
    let taps = gaussian_taps(sigma, radius);
    let mut out = map.clone();
    let mut buf = alloc::vec![0.0; h * w];
    for ch in 0..c {
        blur_plane(&map.plane(ch), h, w, &taps, &mut buf);
        out.set_plane(ch, &buf);
    }
    Ok(out)
}

/// Residual map of `x` under `model`. No noise is injected.
pub fn anomaly_map<R: Reconstruct + ?Sized>(model: &R, x: &Tensor, smooth_sigma: f64) -> Result<AnomalyResult> {
    anomaly_map_with(model, x, smooth_sigma, MapMode::AbsDiff, &SsimConfig::default())
}

pub fn anomaly_map_with<R: Reconstruct + ?Sized>(
    model: &R,
    x: &Tensor,
    smooth_sigma: f64,
    mode: MapMode,
    ssim: &SsimConfig,
) -> Result<AnomalyResult> {
    let recon = model.reconstruct(x)?;
    x.check_same_shape(&recon)?;
    let raw = match mode {
        MapMode::AbsDiff => Tensor::from_vec(
            x.height(),
            x.width(),
            x.channels(),
            x.data().iter().zip(recon.data()).map(|(a, b)| (a - b).abs()).collect(),
        )?
        .channel_mean(),
        MapMode::Ssim => ssim_map(x, &recon, ssim)?.map(|s| ((1.0 - s) / 2.0).max(0.0)),
    };
    Ok(AnomalyResult::from_map(gaussian_smooth(&raw, smooth_sigma)?))
}

/// Area under the ROC curve over all pixels pooled. Ground-truth pixels
/// above 0.5 count as positive. Tied scores form one ROC step, integrated
/// with the trapezoid rule.
pub fn pixel_auroc(maps: &[AnomalyResult], gts: &[Tensor]) -> Result<f64> {
    if maps.len() != gts.len() {
        return Err(Error::arg(format!("{} maps for {} ground truths", maps.len(), gts.len())));
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (m, g) in maps.iter().zip(gts) {
        if m.map.height() != g.height() || m.map.width() != g.width() || g.channels() != 1 {
            return Err(Error::shape(shape_str(m.map.shape()), shape_str(g.shape())));
        }
        scored.extend(m.map.data().iter().zip(g.data()).map(|(&s, &l)| (s, l > 0.5)));
    }
    auroc(&mut scored)
}

pub(crate) fn auroc(scored: &mut [(f64, bool)]) -> Result<f64> {
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::arg("anomaly scores contain NaN"));
    }
    let pos = scored.iter().filter(|(_, l)| *l).count() as f64;
    let neg = scored.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both defect and normal pixels".into(),
        ));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / pos, fp / neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// The `percentile`-th percentile (linear interpolation between order
/// statistics) of all pooled normal-map pixels.
pub fn choose_threshold(normal_maps: &[AnomalyResult], percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::arg(format!("percentile {percentile} outside (0, 100)")));
    }
    let mut pooled: Vec<f64> = normal_maps.iter().flat_map(|m| m.map.data().iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::arg("threshold selection needs at least one normal map"));
    }
    pooled.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&pooled, percentile))
}

pub(crate) fn percentile_sorted(sorted: &[f64], percentile: f64) -> f64 {
    let rank = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Fraction of pixels above `threshold`.
pub fn positive_rate(maps: &[AnomalyResult], threshold: f64) -> f64 {
    let total: usize = maps.iter().map(|m| m.map.len()).sum();
    let above: usize = maps
        .iter()
        .map(|m| m.map.data().iter().filter(|&&v| v > threshold).count())
        .sum();
    above as f64 / total as f64
}
