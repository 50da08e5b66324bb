//! Structural similarity with a Gaussian-weighted sliding window.
//!
//! Local statistics are computed per channel with a separable Gaussian
//! window and half-sample symmetric (reflect) padding, combined into the
//! per-pixel SSIM index, and averaged over channels. The training loss is
//! `1 - mean(ssim_map)` and comes with an analytic gradient.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{blur_plane, blur_plane_adjoint, gaussian_taps};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window_size: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_size: 11,
            sigma: 1.5,
            dynamic_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        let v = self.k1 * self.dynamic_range;
        v * v
    }

    pub fn c2(&self) -> f64 {
        let v = self.k2 * self.dynamic_range;
        v * v
    }

    pub fn radius(&self) -> usize {
        self.window_size / 2
    }

    /// Normalized 1-D window taps.
    pub fn taps(&self) -> Vec<f64> {
        gaussian_taps(self.sigma, self.radius())
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return Err(Error::arg("ssim window_size must be odd and >= 3"));
        }
        if !(self.sigma > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::arg("ssim sigma and dynamic_range must be positive"));
        }
        if !(self.c1() > 0.0) || !(self.c2() > 0.0) {
            return Err(Error::arg("ssim stabilizers must be positive"));
        }
        Ok(())
    }

    fn check_operands(&self, a: &Tensor, b: &Tensor) -> Result<()> {
        self.validate()?;
        a.check_same_shape(b)?;
        if self.window_size > a.height().min(a.width()) {
            return Err(Error::arg(alloc::format!(
                "ssim window {} does not fit a {}x{} image",
                self.window_size,
                a.height(),
                a.width()
            )));
        }
        Ok(())
    }
}

/// Per-channel local statistics, each an `H x W` plane.
struct Moments {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn moments(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> Moments {
    let n = h * w;
    let blur = |src: &[f64]| {
        let mut out = vec![0.0; n];
        blur_plane(src, h, w, taps, &mut out);
        out
    };
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = blur(a);
    let mu_b = blur(b);
    let mut var_a = blur(&aa);
    let mut var_b = blur(&bb);
    let mut cov = blur(&ab);
    for i in 0..n {
        var_a[i] -= mu_a[i] * mu_a[i];
        var_b[i] -= mu_b[i] * mu_b[i];
        cov[i] -= mu_a[i] * mu_b[i];
    }
    Moments {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

#[inline]
fn index_terms(m: &Moments, i: usize, c1: f64, c2: f64) -> (f64, f64, f64, f64) {
    let num_l = 2.0 * m.mu_a[i] * m.mu_b[i] + c1;
    let num_cs = 2.0 * m.cov[i] + c2;
    let den_l = m.mu_a[i] * m.mu_a[i] + m.mu_b[i] * m.mu_b[i] + c1;
    let den_cs = m.var_a[i] + m.var_b[i] + c2;
    (num_l, num_cs, den_l, den_cs)
}

/// Per-pixel SSIM, averaged over channels (`H x W x 1`).
pub fn ssim_map(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    cfg.check_operands(a, b)?;
    let (h, w, ch) = a.shape();
    let taps = cfg.taps();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut out = Tensor::zeros(h, w, 1);
    let inv = 1.0 / ch as f64;
    for c in 0..ch {
        let m = moments(&a.plane(c), &b.plane(c), h, w, &taps);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let (nl, ncs, dl, dcs) = index_terms(&m, i, c1, c2);
            *o += inv * (nl * ncs) / (dl * dcs);
        }
    }
    Ok(out)
}

/// `1 - mean(ssim_map(a, b))`, in `[0, 2]`.
pub fn ssim_loss(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim_map(a, b, cfg)?.mean())
}

/// Loss and its gradient with respect to the second operand.
pub fn ssim_loss_grad(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<(f64, Tensor)> {
    cfg.check_operands(a, b)?;
    let (h, w, ch) = a.shape();
    let n = h * w;
    let taps = cfg.taps();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let d_s = -1.0 / (n * ch) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(h, w, ch);
    let mut g_mu = vec![0.0; n];
    let mut g_var = vec![0.0; n];
    let mut g_cov = vec![0.0; n];
    let mut t_mu = vec![0.0; n];
    let mut t_var = vec![0.0; n];
    let mut t_cov = vec![0.0; n];
    for c in 0..ch {
        let pa = a.plane(c);
        let pb = b.plane(c);
        let m = moments(&pa, &pb, h, w, &taps);
        for i in 0..n {
            let (nl, ncs, dl, dcs) = index_terms(&m, i, c1, c2);
            let s = (nl * ncs) / (dl * dcs);
            total += s;
            let ds_dmu = s * (2.0 * m.mu_a[i] / nl - 2.0 * m.mu_b[i] / dl);
            let ds_dvar = -s / dcs;
            let ds_dcov = 2.0 * s / ncs;
            g_var[i] = d_s * ds_dvar;
            g_cov[i] = d_s * ds_dcov;
            // var_b and cov depend on mu_b as well
            g_mu[i] = d_s * ds_dmu - 2.0 * m.mu_b[i] * g_var[i] - m.mu_a[i] * g_cov[i];
        }
        blur_plane_adjoint(&g_mu, h, w, &taps, &mut t_mu);
        blur_plane_adjoint(&g_var, h, w, &taps, &mut t_var);
        blur_plane_adjoint(&g_cov, h, w, &taps, &mut t_cov);
        let plane: Vec<f64> = (0..n)
            .map(|i| t_mu[i] + 2.0 * pb[i] * t_var[i] + pa[i] * t_cov[i])
            .collect();
        grad.set_plane(c, &plane);
    }
    Ok((1.0 - total / (n * ch) as f64, grad))
}

/// Loss with gradients for both operands `(loss, d/da, d/db)`.
pub fn ssim_loss_grads(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<(f64, Tensor, Tensor)> {
    let (loss, gb) = ssim_loss_grad(a, b, cfg)?;
    // the index is symmetric in its operands
    let (_, ga) = ssim_loss_grad(b, a, cfg)?;
    Ok((loss, ga, gb))
}
