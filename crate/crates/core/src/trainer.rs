//! Denoising training with periodically refreshed noise masks.
//!
//! Each step draws random patches from the normal images, corrupts each with
//! freshly sampled uniform noise shaped by the current [`NoiseMaskPair`],
//! and takes one Adam step on the mean SSIM loss between the clean patch and
//! the reconstruction of the corrupted one. Every `mask_update_interval`
//! iterations the masks are rebuilt from the model's current residuals, so
//! model and masks improve together.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{apply_noise, compose_applied_noise, sample_base_noise, update_residual_maps, NoiseMaskPair};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::reconstructor::{Reconstructor, ReconstructorConfig};
use crate::ssim::{ssim_loss_grad, SsimConfig};
use crate::tensor::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub mask_update_interval: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub noise_amplitude: f64,
    pub blend: f64,
    /// Side of the square training patches; 0 trains on whole images.
    pub patch_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// When false the masks stay neutral for the whole run (plain uniform
    /// denoising), which is the ablation baseline.
    pub masks_enabled: bool,
    /// Normal patches drawn for each mask update.
    pub mask_normal_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            mask_update_interval: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            noise_amplitude: 0.2,
            blend: 0.25,
            patch_size: 64,
            seed: 0,
            checkpoint_every: 1000,
            masks_enabled: true,
            mask_normal_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations),
            ("mask_update_interval", self.mask_update_interval),
            ("batch_size", self.batch_size as u64),
            ("checkpoint_every", self.checkpoint_every),
            ("mask_normal_samples", self.mask_normal_samples as u64),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("{name} must be positive")));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg("learning_rate must be >= 0"));
        }
        if !(self.noise_amplitude > 0.0) || !self.noise_amplitude.is_finite() {
            return Err(Error::arg("noise_amplitude must be positive"));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::arg("blend must be in [0, 1]"));
        }
        Ok(())
    }

    /// Non-fatal configuration problems.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.mask_update_interval > self.iterations {
            w.push(format!(
                "mask_update_interval {} exceeds iterations {}; masks will stay neutral",
                self.mask_update_interval, self.iterations
            ));
        }
        w
    }

    /// Iterations at which masks are rebuilt: every multiple of the interval
    /// in `(0, iterations]`.
    pub fn mask_schedule(&self) -> impl Iterator<Item = u64> + '_ {
        (1..=self.iterations / self.mask_update_interval).map(move |k| k * self.mask_update_interval)
    }
}

/// Images the trainer draws from. Only `normal` enters the loss; `anomalous`
/// feeds the positive mask.
#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub normal: Vec<Image>,
    pub anomalous: Vec<Image>,
}

/// Everything the loop mutates. Owned exclusively by one trainer.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Reconstructor,
    pub optimizer: Adam,
    pub masks: NoiseMaskPair,
    pub iteration: u64,
    pub loss_history: Vec<f64>,
    pub mask_update_iterations: Vec<u64>,
    batch_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
}

const MASK_STREAM: u64 = 0x6d61_736b_5f72_6e67;

impl TrainState {
    pub fn new(model: Reconstructor, cfg: &TrainConfig, mask_side: (usize, usize)) -> Self {
        let optimizer = Adam::new(
            AdamConfig {
                learning_rate: cfg.learning_rate,
                ..AdamConfig::default()
            },
            model.params(),
        );
        TrainState {
            model,
            optimizer,
            masks: NoiseMaskPair::neutral(mask_side.0, mask_side.1),
            iteration: 0,
            loss_history: Vec::new(),
            mask_update_iterations: Vec::new(),
            batch_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            mask_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ MASK_STREAM),
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.model.params()
    }
}

/// Spatial size of the training inputs (and of the masks).
pub fn training_side(data: &TrainingData, cfg: &TrainConfig) -> Result<(usize, usize)> {
    let first = data
        .normal
        .first()
        .ok_or_else(|| Error::arg("training needs at least one normal image"))?;
    if cfg.patch_size == 0 {
        if let Some(x) = data.normal.iter().find(|x| !x.same_shape(first)) {
            return Err(Error::shape(
                crate::tensor::shape_str(first.shape()),
                crate::tensor::shape_str(x.shape()),
            ));
        }
        Ok((first.height(), first.width()))
    } else {
        Ok((cfg.patch_size, cfg.patch_size))
    }
}

/// One random patch of `side` from a random image in `pool`.
fn draw_patch(rng: &mut ChaCha8Rng, pool: &[Image], side: (usize, usize)) -> Result<Image> {
    let img = &pool[rng.random_range(0..pool.len())];
    crop_random(rng, img, side)
}

fn crop_random(rng: &mut ChaCha8Rng, img: &Image, (h, w): (usize, usize)) -> Result<Image> {
    if img.height() == h && img.width() == w {
        return Ok(img.clone());
    }
    if img.height() < h || img.width() < w {
        return Err(Error::arg(format!(
            "{}x{} image is smaller than the {h}x{w} training size",
            img.height(),
            img.width()
        )));
    }
    let top = rng.random_range(0..=img.height() - h);
    let left = rng.random_range(0..=img.width() - w);
    Image::new(img.tensor().crop(top, left, h, w)?)
}

pub(crate) fn sample_batch(
    rng: &mut ChaCha8Rng,
    pool: &[Image],
    side: (usize, usize),
    batch_size: usize,
) -> Result<Vec<Image>> {
    (0..batch_size).map(|_| draw_patch(rng, pool, side)).collect()
}

/// Random patches from random normal images for the next step.
pub fn assemble_batch(state: &mut TrainState, data: &TrainingData, cfg: &TrainConfig) -> Result<Vec<Image>> {
    let side = (state.masks.height(), state.masks.width());
    sample_batch(&mut state.batch_rng, &data.normal, side, cfg.batch_size)
}

/// Mean loss and parameter gradient of a batch, given one noise seed per
/// image.
pub fn batch_loss_and_grad(
    model: &Reconstructor,
    masks: &NoiseMaskPair,
    batch: &[Image],
    noise_seeds: &[u64],
    cfg: &TrainConfig,
    ssim: &SsimConfig,
) -> Result<(f64, Vec<f64>, ParamSet)> {
    let mut grads = model.params().zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    for (x, &seed) in batch.iter().zip(noise_seeds) {
        let z = sample_base_noise(x.shape(), cfg.noise_amplitude, seed)?;
        let z_hat = if cfg.masks_enabled {
            compose_applied_noise(&z, masks, cfg.blend)?
        } else {
            z
        };
        let noisy = apply_noise(x, &z_hat)?;
        let cache = model.forward_cached(&noisy)?;
        let (loss, mut g) = ssim_loss_grad(x, cache.output(), ssim)?;
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
        model.backward(&cache, &g, &mut grads, false);
        losses.push(loss);
    }
    let mean = losses.iter().sum::<f64>() * scale;
    Ok((mean, losses, grads))
}

/// Noise injection, SSIM loss, backprop and one Adam update.
pub fn train_step(state: &mut TrainState, batch: &[Image], cfg: &TrainConfig, ssim: &SsimConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::arg("empty training batch"));
    }
    if let Some(x) = batch
        .iter()
        .find(|x| x.height() != state.masks.height() || x.width() != state.masks.width())
    {
        return Err(Error::shape(
            format!("{}x{} patch", state.masks.height(), state.masks.width()),
            crate::tensor::shape_str(x.shape()),
        ));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| state.batch_rng.next_u64()).collect();
    let (loss, losses, grads) = batch_loss_and_grad(&state.model, &state.masks, batch, &seeds, cfg, ssim)?;
    if !loss.is_finite() {
        let finite: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite()).collect();
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration + 1,
            batch_mean: loss,
            batch_min: finite.iter().copied().fold(f64::INFINITY, f64::min),
            batch_max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    state.optimizer.step(state.model.params_mut(), &grads);
    state.loss_history.push(loss);
    state.iteration += 1;
    Ok(loss)
}

/// Rebuild the masks when the iteration counter hits a multiple of the
/// update interval. Returns whether an update happened.
pub fn maybe_update_masks(state: &mut TrainState, data: &TrainingData, cfg: &TrainConfig) -> Result<bool> {
    if state.iteration == 0 || !state.iteration.is_multiple_of(cfg.mask_update_interval) || !cfg.masks_enabled {
        return Ok(false);
    }
    let side = (state.masks.height(), state.masks.width());
    let normal = sample_batch(&mut state.mask_rng, &data.normal, side, cfg.mask_normal_samples)?;
    let anomalous = data
        .anomalous
        .iter()
        .map(|img| crop_random(&mut state.mask_rng, img, side))
        .collect::<Result<Vec<_>>>()?;
    let masks = update_residual_maps(&state.model, &normal, &anomalous, state.iteration)?;
    state.masks = masks;
    state.mask_update_iterations.push(state.iteration);
    Ok(true)
}

/// Set up a fresh model and state for `data`.
pub fn init_state(
    data: &TrainingData,
    cfg: &TrainConfig,
    model_cfg: ReconstructorConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    let side = training_side(data, cfg)?;
    let model = Reconstructor::init(model_cfg)?;
    let probe = crate::tensor::Tensor::zeros(side.0, side.1, model_cfg.in_channels);
    model.check_input(&probe)?;
    if let Some(x) = data.normal.iter().chain(&data.anomalous).find(|x| x.channels() != model_cfg.in_channels) {
        return Err(Error::shape(
            format!("{} channels", model_cfg.in_channels),
            format!("{} channels", x.channels()),
        ));
    }
    Ok(TrainState::new(model, cfg, side))
}

/// Run the whole schedule in memory. `on_iteration` sees the state after
/// each step and mask update and may abort the run with an error.
pub fn run<E>(
    data: &TrainingData,
    cfg: &TrainConfig,
    model_cfg: ReconstructorConfig,
    ssim: &SsimConfig,
    mut on_iteration: impl FnMut(&TrainState, bool) -> core::result::Result<(), E>,
) -> core::result::Result<TrainState, E>
where
    E: From<Error>,
{
    let mut state = init_state(data, cfg, model_cfg)?;
    while state.iteration < cfg.iterations {
        let batch = assemble_batch(&mut state, data, cfg)?;
        train_step(&mut state, &batch, cfg, ssim)?;
        let updated = maybe_update_masks(&mut state, data, cfg)?;
        on_iteration(&state, updated)?;
    }
    Ok(state)
}
