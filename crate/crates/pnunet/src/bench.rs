//! Feed-forward versus latent-search inference timing.

use std::time::Instant;

use pnunet_core::baseline::{latent_search, Autoencoder, SearchConfig, SearchOutcome};
use pnunet_core::imaging::procedural_texture;
use pnunet_core::reconstructor::Reconstructor;
use pnunet_core::ssim::SsimConfig;
use pnunet_core::{Image, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report::{create_dir, write_json, write_report};
use crate::weights::load_autoencoder;

pub const BENCH_FILE: &str = "bench.json";
pub const MIN_BENCH_IMAGES: usize = 10;

/// Latent search plus its wall-clock time in seconds.
pub fn latent_search_infer(
    model: &Autoencoder,
    x: &Tensor,
    scfg: &SearchConfig,
    ssim: &SsimConfig,
) -> Result<(SearchOutcome, f64)> {
    let start = Instant::now();
    let outcome = latent_search(model, x, scfg, ssim)?;
    Ok((outcome, start.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone, Serialize)]
pub struct Host {
    pub os: &'static str,
    pub arch: &'static str,
    pub available_parallelism: usize,
    pub threads_used: usize,
}

impl Host {
    pub fn current() -> Self {
        Host {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads_used: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub forward_seconds: Vec<f64>,
    pub search_seconds: Vec<f64>,
    pub mean_forward_seconds: f64,
    pub mean_search_seconds: f64,
    /// `mean_search_seconds / mean_forward_seconds`.
    pub ratio: f64,
    pub search_steps: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub best_search_losses: Vec<f64>,
    pub host: Host,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Time one reconstructor forward pass and one latent search per image,
/// sequentially on this thread. The first image is run once beforehand as
/// an untimed warm-up.
pub fn bench_inference(
    recon: &Reconstructor,
    ae: &Autoencoder,
    images: &[Image],
    scfg: &SearchConfig,
    ssim: &SsimConfig,
) -> Result<BenchReport> {
    if images.len() < MIN_BENCH_IMAGES {
        return Err(pnunet_core::Error::InvalidArgument(format!(
            "benchmark needs at least {MIN_BENCH_IMAGES} images, got {}",
            images.len()
        ))
        .into());
    }
    let warm = &images[0];
    recon.forward(warm)?;
    latent_search_infer(ae, warm, scfg, ssim)?;

    let mut forward_seconds = Vec::with_capacity(images.len());
    let mut search_seconds = Vec::with_capacity(images.len());
    let mut best_search_losses = Vec::with_capacity(images.len());
    for x in images {
        let start = Instant::now();
        std::hint::black_box(recon.forward(x)?);
        forward_seconds.push(start.elapsed().as_secs_f64());
        let (outcome, secs) = latent_search_infer(ae, x, scfg, ssim)?;
        search_seconds.push(secs);
        best_search_losses.push(outcome.best_loss);
    }
    let (mean_forward_seconds, mean_search_seconds) = (mean(&forward_seconds), mean(&search_seconds));
    Ok(BenchReport {
        ratio: mean_search_seconds / mean_forward_seconds,
        forward_seconds,
        search_seconds,
        mean_forward_seconds,
        mean_search_seconds,
        search_steps: scfg.steps,
        image_height: warm.height(),
        image_width: warm.width(),
        best_search_losses,
        host: Host::current(),
    })
}

fn bench_images(cfg: &RunConfig, channels: usize) -> Result<Vec<Image>> {
    let b = &cfg.bench;
    match &cfg.dataset {
        Some(spec) => {
            let grayscale = channels == 1;
            let normal = crate::dataset::DatasetSpec { grayscale, ..spec.clone() }.load()?.normal;
            normal
                .iter()
                .cycle()
                .take(b.images)
                .map(|n| Ok(n.image.crop(0, 0, b.image_size)?))
                .collect()
        }
        None => (0..b.images as u64)
            .map(|i| Ok(procedural_texture(b.image_size, b.image_size, channels, cfg.gen_data.seed + i)?))
            .collect(),
    }
}

/// The `bench` command. Untrained models are timed when no weights are
/// configured; timing does not depend on the parameter values.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let recon = match &cfg.detector.weights {
        Some(path) => crate::weights::load_reconstructor(path)?,
        None => Reconstructor::init(cfg.reconstructor)?,
    };
    let ae = match &cfg.bench.autoencoder_weights {
        Some(path) => load_autoencoder(path)?,
        None => Autoencoder::init(cfg.autoencoder)?,
    };
    let side = cfg.bench.image_size;
    if (ae.config().height, ae.config().width) != (side, side) {
        return Err(Error::config(
            "autoencoder.height",
            format!("autoencoder is {}x{}, bench images are {side}x{side}", ae.config().height, ae.config().width),
        ));
    }
    if ae.config().in_channels != recon.config().in_channels {
        return Err(Error::config("autoencoder.in_channels", "must match the reconstructor"));
    }
    let images = bench_images(cfg, recon.config().in_channels)?;
    let report = bench_inference(&recon, &ae, &images, &cfg.search, &cfg.ssim)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let path = out.join(BENCH_FILE);
    write_json(&path, &report)?;
    write_report(out, "bench", cfg, &[path], serde_json::to_value(&report).unwrap())?;
    Ok(report)
}
