//! Iterative latent-search inference, the slow pattern that feed-forward
//! reconstruction avoids.
//!
//! A plain convolutional autoencoder (no skip connections) stands in for a
//! generator. At inference the latent code of a query is refined by gradient
//! steps through the frozen decoder until the decoded image matches the
//! query; the best decode seen is the reconstruction.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, BlockCache, ConvCache, ConvShape};
use crate::math::sqrt;
use crate::optim::{Adam, AdamConfig, VecAdam};
use crate::params::{self, LayerSpec, ParamSet};
use crate::reconstructor::Reconstruct;
use crate::ssim::{ssim_loss_grad, SsimConfig};
use crate::tensor::{shape_str, Image, Tensor};
use crate::trainer::{sample_batch, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            levels: 3,
            base_channels: 16,
            in_channels: 1,
            kernel_size: 3,
            latent_dim: 64,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.levels > 16 {
            return Err(Error::arg("autoencoder levels must be in [1, 16]"));
        }
        if self.base_channels < 2 || self.latent_dim < 1 {
            return Err(Error::arg("autoencoder widths must be positive"));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::arg("in_channels must be 1 or 3"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::arg("kernel_size must be odd"));
        }
        let m = 1 << self.levels;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(m) || !self.width.is_multiple_of(m) {
            return Err(Error::arg(format!(
                "autoencoder image {}x{} must be divisible by {m}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn bottom(&self) -> (usize, usize, usize) {
        (
            self.height >> self.levels,
            self.width >> self.levels,
            self.width_at(self.levels - 1),
        )
    }

    fn conv(&self, in_ch: usize, out_ch: usize) -> ConvShape {
        ConvShape {
            kernel: self.kernel_size,
            in_ch,
            out_ch,
        }
    }

    /// Parameter layout and the conv shape of every parameter pair. The two
    /// dense layers get placeholder shapes so indices stay aligned.
    fn layout(&self) -> (Vec<LayerSpec>, Vec<ConvShape>) {
        let l = self.levels;
        let mut specs = Vec::new();
        let mut shapes = Vec::new();
        let mut prev = self.in_channels;
        for i in 0..l {
            for (j, s) in [
                self.conv(prev, self.width_at(i)),
                self.conv(self.width_at(i), self.width_at(i)),
            ]
            .into_iter()
            .enumerate()
            {
                specs.push(LayerSpec::conv(format!("enc{i}.conv{j}"), s));
                shapes.push(s);
            }
            prev = self.width_at(i);
        }
        let (bh, bw, bc) = self.bottom();
        let flat = bh * bw * bc;
        let placeholder = ConvShape {
            kernel: 0,
            in_ch: 0,
            out_ch: 0,
        };
        specs.push(LayerSpec::dense("latent", flat, self.latent_dim));
        specs.push(LayerSpec::dense("expand", self.latent_dim, flat));
        shapes.extend([placeholder, placeholder]);
        let mut prev = bc;
        for i in (0..l).rev() {
            for (j, s) in [
                self.conv(prev, self.width_at(i)),
                self.conv(self.width_at(i), self.width_at(i)),
            ]
            .into_iter()
            .enumerate()
            {
                specs.push(LayerSpec::conv(format!("dec{i}.conv{j}"), s));
                shapes.push(s);
            }
            prev = self.width_at(i);
        }
        let head = ConvShape {
            kernel: 1,
            in_ch: self.width_at(0),
            out_ch: self.in_channels,
        };
        specs.push(LayerSpec::conv("head", head));
        shapes.push(head);
        (specs, shapes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    params: ParamSet,
    shapes: Vec<ConvShape>,
}

pub struct EncodeCache {
    blocks: Vec<BlockCache>,
    flat: Vec<f64>,
}

pub struct DecodeCache {
    latent: Vec<f64>,
    expand_pre: Vec<f64>,
    blocks: Vec<BlockCache>,
    head: ConvCache,
    output: Tensor,
}

impl DecodeCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Autoencoder {
    pub fn init(config: AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let (specs, shapes) = config.layout();
        Ok(Autoencoder {
            config,
            params: params::init_for(&specs, config.seed),
            shapes,
        })
    }

    pub fn from_params(config: AutoencoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let (specs, shapes) = config.layout();
        params::check_layout(&params, &specs)?;
        Ok(Autoencoder { config, params, shapes })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn latent_idx(&self) -> usize {
        2 * self.config.levels
    }

    fn dec_first(&self, level: usize) -> usize {
        let l = self.config.levels;
        2 * l + 2 + 2 * (l - 1 - level)
    }

    fn head_idx(&self) -> usize {
        4 * self.config.levels + 2
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = (self.config.height, self.config.width, self.config.in_channels);
        if x.shape() != want {
            return Err(Error::shape(shape_str(want), shape_str(x.shape())));
        }
        Ok(())
    }

    pub fn encode_cached(&self, x: &Tensor) -> Result<(Vec<f64>, EncodeCache)> {
        self.check_input(x)?;
        let mut blocks = Vec::with_capacity(self.config.levels);
        let mut h = x.clone();
        for i in 0..self.config.levels {
            let (out, cache) = layers::block_forward(&self.params, &self.shapes, 2 * i, &h);
            blocks.push(cache);
            h = layers::avg_pool2(&out);
        }
        let flat = h.into_vec();
        let (w, b) = self.params.conv(self.latent_idx());
        let z = layers::dense_forward(&flat, w, b);
        Ok((z, EncodeCache { blocks, flat }))
    }

    pub fn encode(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode_cached(x)?.0)
    }

    pub fn decode_cached(&self, latent: &[f64]) -> Result<DecodeCache> {
        if latent.len() != self.config.latent_dim {
            return Err(Error::shape(
                format!("latent of {}", self.config.latent_dim),
                format!("latent of {}", latent.len()),
            ));
        }
        let (w, b) = self.params.conv(self.latent_idx() + 1);
        let expand_pre = layers::dense_forward(latent, w, b);
        let (bh, bw, bc) = self.config.bottom();
        let mut h = layers::leaky_relu(&Tensor::from_vec(bh, bw, bc, expand_pre.clone())?);
        let mut blocks = Vec::with_capacity(self.config.levels);
        for i in (0..self.config.levels).rev() {
            let up = layers::upsample2(&h);
            let (out, cache) = layers::block_forward(&self.params, &self.shapes, self.dec_first(i), &up);
            blocks.push(cache);
            h = out;
        }
        let hi = self.head_idx();
        let (w, b) = self.params.conv(hi);
        let (pre, head) = layers::conv_forward(&h, self.shapes[hi], w, b);
        Ok(DecodeCache {
            latent: latent.to_vec(),
            expand_pre,
            blocks,
            head,
            output: layers::sigmoid_forward(&pre),
        })
    }

    pub fn decode(&self, latent: &[f64]) -> Result<Tensor> {
        Ok(self.decode_cached(latent)?.output)
    }

    /// Backprop through the decoder; returns d loss / d latent.
    pub fn decode_backward(&self, cache: &DecodeCache, grad_output: &Tensor, grads: &mut ParamSet) -> Vec<f64> {
        let mut g = grad_output.clone();
        layers::sigmoid_backward(&cache.output, &mut g);
        let hi = self.head_idx();
        let (w, _) = self.params.conv(hi);
        let (gw, gb) = grads.conv_mut(hi);
        let mut g = layers::conv_backward(&cache.head, &g, self.shapes[hi], w, gw, gb, true)
            .expect("input grad requested");
        let l = self.config.levels;
        for i in 0..l {
            let gi = layers::block_backward(
                &self.params,
                &self.shapes,
                self.dec_first(i),
                &cache.blocks[l - 1 - i],
                g,
                grads,
                true,
            )
            .expect("input grad requested");
            g = layers::upsample2_backward(&gi);
        }
        let mut g_flat = g.into_vec();
        for (gv, &p) in g_flat.iter_mut().zip(&cache.expand_pre) {
            if p <= 0.0 {
                *gv *= layers::LEAKY_SLOPE;
            }
        }
        let ei = self.latent_idx() + 1;
        let (w, _) = self.params.conv(ei);
        let (gw, gb) = grads.conv_mut(ei);
        layers::dense_backward(&cache.latent, &g_flat, w, gw, gb, true).expect("input grad requested")
    }

    pub fn encode_backward(&self, cache: &EncodeCache, grad_latent: &[f64], grads: &mut ParamSet) {
        let li = self.latent_idx();
        let (w, _) = self.params.conv(li);
        let (gw, gb) = grads.conv_mut(li);
        let g_flat = layers::dense_backward(&cache.flat, grad_latent, w, gw, gb, true).expect("input grad requested");
        let (bh, bw, bc) = self.config.bottom();
        let mut g = Tensor::from_vec(bh, bw, bc, g_flat).expect("bottom shape");
        for i in (0..self.config.levels).rev() {
            let gp = layers::avg_pool2_backward(&g);
            match layers::block_backward(&self.params, &self.shapes, 2 * i, &cache.blocks[i], gp, grads, i > 0) {
                Some(next) => g = next,
                None => return,
            }
        }
    }
}

impl Reconstruct for Autoencoder {
    fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }
}

/// Plain reconstruction training: no noise, no masks.
pub fn train_autoencoder(
    normal: &[Image],
    cfg: &TrainConfig,
    ae_cfg: AutoencoderConfig,
    ssim: &SsimConfig,
) -> Result<(Autoencoder, Vec<f64>)> {
    cfg.validate()?;
    if normal.is_empty() {
        return Err(Error::arg("autoencoder training needs normal images"));
    }
    let mut model = Autoencoder::init(ae_cfg)?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = (ae_cfg.height, ae_cfg.width);
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    for it in 0..cfg.iterations {
        let batch = sample_batch(&mut rng, normal, side, cfg.batch_size)?;
        let mut grads = model.params.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for x in &batch {
            let (z, enc) = model.encode_cached(x)?;
            let dec = model.decode_cached(&z)?;
            let (loss, mut g) = ssim_loss_grad(x, dec.output(), ssim)?;
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            let gz = model.decode_backward(&dec, &g, &mut grads);
            model.encode_backward(&enc, &gz, &mut grads);
            total += loss * scale;
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it + 1,
                batch_mean: total,
                batch_min: f64::NAN,
                batch_max: f64::NAN,
            });
        }
        opt.step(&mut model.params, &grads);
        history.push(total);
    }
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            steps: 500,
            step_size: 0.05,
            restarts: 1,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts < 1 {
            return Err(Error::arg("restarts must be >= 1"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::arg("step_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub reconstruction: Tensor,
    /// Channel-mean `|x - reconstruction|`.
    pub residual_map: Tensor,
    pub best_loss: f64,
    pub initial_loss: f64,
    pub latent: Vec<f64>,
}

/// Spread of the perturbation applied to the encoder's code on restarts
/// after the first.
const RESTART_JITTER: f64 = 0.1;

/// Refine the latent code of `x` with Adam steps on the SSIM loss through
/// the frozen decoder, starting from the encoder's code. With zero steps the
/// result is exactly `decode(encode(x))`.
pub fn latent_search(model: &Autoencoder, x: &Tensor, scfg: &SearchConfig, ssim: &SsimConfig) -> Result<SearchOutcome> {
    scfg.validate()?;
    let start = model.encode(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
    let mut scratch = model.params.zeros_like();
    let mut best: Option<(f64, Tensor, Vec<f64>)> = None;
    let mut initial_loss = f64::NAN;
    for restart in 0..scfg.restarts {
        let mut latent = start.clone();
        if restart > 0 {
            for v in latent.iter_mut() {
                *v += RESTART_JITTER * gaussian(&mut rng);
            }
        }
        let mut opt = VecAdam::new(scfg.step_size, latent.len());
        for step in 0..=scfg.steps {
            let cache = model.decode_cached(&latent)?;
            let (loss, g) = ssim_loss_grad(x, cache.output(), ssim)?;
            if !loss.is_finite() {
                return Err(Error::SearchDiverged { step, loss });
            }
            if restart == 0 && step == 0 {
                initial_loss = loss;
            }
            if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                best = Some((loss, cache.output().clone(), latent.clone()));
            }
            if step == scfg.steps {
                break;
            }
            let gz = model.decode_backward(&cache, &g, &mut scratch);
            opt.step(&mut latent, &gz);
        }
    }
    let (best_loss, reconstruction, latent) = best.expect("at least one evaluation");
    let residual_map = Tensor::from_vec(
        x.height(),
        x.width(),
        x.channels(),
        x.data().iter().zip(reconstruction.data()).map(|(a, b)| (a - b).abs()).collect(),
    )?
    .channel_mean();
    Ok(SearchOutcome {
        reconstruction,
        residual_map,
        best_loss,
        initial_loss,
        latent,
    })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::procedural_texture;

    fn tiny() -> AutoencoderConfig {
        AutoencoderConfig {
            levels: 2,
            base_channels: 4,
            in_channels: 1,
            kernel_size: 3,
            latent_dim: 8,
            height: 16,
            width: 16,
            seed: 3,
        }
    }

    fn ssim() -> SsimConfig {
        SsimConfig {
            window_size: 7,
            ..SsimConfig::default()
        }
    }

    #[test]
    fn shapes_round_trip() {
        let ae = Autoencoder::init(tiny()).unwrap();
        let x = procedural_texture(16, 16, 1, 0).unwrap();
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.len(), 8);
        let y = ae.decode(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(ae.encode(&Tensor::zeros(8, 16, 1)).is_err());
        assert!(ae.decode(&[0.0; 3]).is_err());
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let ae = Autoencoder::init(tiny()).unwrap();
        let x = procedural_texture(16, 16, 1, 1).unwrap();
        let z = ae.encode(&x).unwrap();
        let cache = ae.decode_cached(&z).unwrap();
        let (_, g) = ssim_loss_grad(&x, cache.output(), &ssim()).unwrap();
        let mut scratch = ae.params().zeros_like();
        let gz = ae.decode_backward(&cache, &g, &mut scratch);
        let loss = |z: &[f64]| crate::ssim::ssim_loss(&x, &ae.decode(z).unwrap(), &ssim()).unwrap();
        for i in 0..z.len() {
            let mut p = z.clone();
            p[i] += 1e-5;
            let mut m = z.clone();
            m[i] -= 1e-5;
            let fd = (loss(&p) - loss(&m)) / 2e-5;
            assert!((fd - gz[i]).abs() <= 1e-4 * fd.abs().max(gz[i].abs()).max(1e-6), "{i}: {fd} vs {}", gz[i]);
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let ae = Autoencoder::init(tiny()).unwrap();
        let x = procedural_texture(16, 16, 1, 2).unwrap();
        let (z, enc) = ae.encode_cached(&x).unwrap();
        let gz: Vec<f64> = (0..z.len()).map(|i| (i as f64 - 3.5) / 4.0).collect();
        let mut grads = ae.params().zeros_like();
        ae.encode_backward(&enc, &gz, &mut grads);
        let f = |p: &ParamSet| -> f64 {
            let m = Autoencoder::from_params(tiny(), p.clone()).unwrap();
            m.encode(&x).unwrap().iter().zip(&gz).map(|(a, b)| a * b).sum()
        };
        for (ti, idx) in [(0usize, 5usize), (2, 17), (4, 0)] {
            let mut p = ae.params().clone();
            p.tensors_mut()[ti].data[idx] += 1e-6;
            let mut m = ae.params().clone();
            m.tensors_mut()[ti].data[idx] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            let an = grads.tensors()[ti].data[idx];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-6), "{ti}/{idx}: {fd} vs {an}");
        }
    }

    #[test]
    fn zero_steps_is_plain_reconstruction() {
        let ae = Autoencoder::init(tiny()).unwrap();
        let x = procedural_texture(16, 16, 1, 4).unwrap();
        let cfg = SearchConfig {
            steps: 0,
            ..SearchConfig::default()
        };
        let out = latent_search(&ae, &x, &cfg, &ssim()).unwrap();
        let direct = ae.reconstruct(&x).unwrap();
        assert_eq!(out.reconstruction, direct);
        assert_eq!(out.best_loss, out.initial_loss);
    }

    #[test]
    fn best_loss_is_monotone_in_steps() {
        let ae = Autoencoder::init(tiny()).unwrap();
        let x = procedural_texture(16, 16, 1, 5).unwrap();
        let mut prev = f64::INFINITY;
        for steps in [0, 5, 20, 60] {
            let cfg = SearchConfig {
                steps,
                ..SearchConfig::default()
            };
            let out = latent_search(&ae, &x, &cfg, &ssim()).unwrap();
            assert!(out.best_loss <= prev);
            prev = out.best_loss;
        }
    }

    #[test]
    fn training_reduces_loss_and_zero_lr_is_identity() {
        let imgs = [procedural_texture(16, 16, 1, 6).unwrap()];
        let cfg = TrainConfig {
            iterations: 60,
            batch_size: 1,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let (_, hist) = train_autoencoder(&imgs, &cfg, tiny(), &ssim()).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let frozen = TrainConfig {
            learning_rate: 0.0,
            iterations: 3,
            ..cfg
        };
        let (ae, _) = train_autoencoder(&imgs, &frozen, tiny(), &ssim()).unwrap();
        assert_eq!(ae.params(), Autoencoder::init(tiny()).unwrap().params());
    }
}
