//! `infer` and `eval`: anomaly maps for folders of images.

use std::path::{Path, PathBuf};

use pnunet_core::detector::{anomaly_map_with, choose_threshold, pixel_auroc, positive_rate, AnomalyResult};
use pnunet_core::reconstructor::Reconstructor;
use pnunet_core::{Image, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::NamedImage;
use crate::error::{Error, Result};
use crate::io::{list_images, load_image, save_f32, save_map_png16, save_mask_png, stem};
use crate::report::{create_dir, write_json, write_report};
use crate::weights::load_reconstructor;

pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferSummary {
    pub threshold: f64,
    pub images: Vec<ImageScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub auroc: f64,
    pub threshold: f64,
    pub percentile: f64,
    /// Fraction of normal-image pixels above the threshold.
    pub normal_positive_rate: f64,
    pub anomalous: Vec<ImageScore>,
    pub normal: Vec<ImageScore>,
}

pub fn load_model(cfg: &RunConfig) -> Result<Reconstructor> {
    let path = cfg
        .detector
        .weights
        .as_ref()
        .ok_or_else(|| Error::config("detector.weights", "this command needs trained weights"))?;
    load_reconstructor(path)
}

pub fn map_for(model: &Reconstructor, cfg: &RunConfig, image: &Image) -> Result<AnomalyResult> {
    let d = &cfg.detector;
    Ok(anomaly_map_with(model, image, d.smooth_sigma, d.map_mode, &cfg.ssim)?)
}

/// `<stem>_map.png`, `<stem>_map.f32` and `<stem>_mask.png` in `dir`.
pub fn write_outputs(dir: &Path, name: &str, result: &AnomalyResult) -> Result<Vec<PathBuf>> {
    let map_png = dir.join(format!("{name}_map.png"));
    let map_raw = dir.join(format!("{name}_map.f32"));
    let mask_png = dir.join(format!("{name}_mask.png"));
    save_map_png16(&map_png, &result.map)?;
    save_f32(&map_raw, &result.map)?;
    let mask = result
        .binary_mask
        .clone()
        .unwrap_or_else(|| Tensor::zeros(result.map.height(), result.map.width(), 1));
    save_mask_png(&mask_png, &mask)?;
    Ok(vec![map_png, map_raw, mask_png])
}

fn maps(model: &Reconstructor, cfg: &RunConfig, images: &[NamedImage]) -> Result<Vec<AnomalyResult>> {
    images.iter().map(|n| map_for(model, cfg, &n.image)).collect()
}

fn threshold_from(cfg: &RunConfig, normal_maps: &[AnomalyResult]) -> Result<f64> {
    match cfg.detector.threshold {
        Some(t) => Ok(t),
        None => Ok(choose_threshold(normal_maps, cfg.detector.percentile)?),
    }
}

fn scores(images: &[NamedImage], maps: &[AnomalyResult]) -> Vec<ImageScore> {
    images
        .iter()
        .zip(maps)
        .map(|(n, m)| ImageScore {
            name: n.name.clone(),
            score: m.image_score,
        })
        .collect()
}

pub fn infer(cfg: &RunConfig) -> Result<InferSummary> {
    let model = load_model(cfg)?;
    let input = cfg
        .detector
        .input_dir
        .as_ref()
        .ok_or_else(|| Error::config("detector.input_dir", "infer needs an input folder"))?;
    let grayscale = model.config().in_channels == 1;
    let threshold = match (cfg.detector.threshold, &cfg.dataset) {
        (Some(t), _) => t,
        (None, Some(spec)) => {
            let normal = crate::dataset::DatasetSpec { grayscale, ..spec.clone() }.load()?.normal;
            threshold_from(cfg, &maps(&model, cfg, &normal)?)?
        }
        (None, None) => {
            return Err(Error::config(
                "detector.threshold",
                "set a threshold or a dataset whose normal images calibrate one",
            ))
        }
    };
    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut artifacts = Vec::new();
    let mut images = Vec::new();
    for path in list_images(input)? {
        let name = stem(&path);
        let image = load_image(&path, grayscale)?;
        let mut result = map_for(&model, cfg, &image)?;
        result.binarize(threshold);
        artifacts.extend(write_outputs(out, &name, &result)?);
        images.push(ImageScore {
            name,
            score: result.image_score,
        });
    }
    let summary = InferSummary { threshold, images };
    write_report(out, "infer", cfg, &artifacts, serde_json::to_value(&summary).unwrap())?;
    Ok(summary)
}

/// Pixel AUROC over the dataset's anomalous images (with ground truth) and
/// normal images (all-negative), plus the percentile threshold from the
/// normal images.
pub fn eval(cfg: &RunConfig) -> Result<EvalSummary> {
    let model = load_model(cfg)?;
    let spec = cfg.dataset()?;
    if spec.anomalous_dir.is_none() || spec.ground_truth_dir.is_none() {
        return Err(Error::config(
            "dataset",
            "eval needs anomalous_dir and ground_truth_dir",
        ));
    }
    let grayscale = model.config().in_channels == 1;
    let data = crate::dataset::DatasetSpec { grayscale, ..spec.clone() }.load()?;
    let normal_maps = maps(&model, cfg, &data.normal)?;
    let mut anomalous_maps = maps(&model, cfg, &data.anomalous)?;
    let threshold = threshold_from(cfg, &normal_maps)?;

    let mut all_maps = anomalous_maps.clone();
    all_maps.extend(normal_maps.iter().cloned());
    let mut gts = data.ground_truth.clone();
    gts.extend(normal_maps.iter().map(|m| Tensor::zeros(m.map.height(), m.map.width(), 1)));
    let auroc = pixel_auroc(&all_maps, &gts)?;

    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut artifacts = Vec::new();
    for (n, m) in data.anomalous.iter().zip(anomalous_maps.iter_mut()) {
        m.binarize(threshold);
        artifacts.extend(write_outputs(out, &n.name, m)?);
    }
    let summary = EvalSummary {
        auroc,
        threshold,
        percentile: cfg.detector.percentile,
        normal_positive_rate: positive_rate(&normal_maps, threshold),
        anomalous: scores(&data.anomalous, &anomalous_maps),
        normal: scores(&data.normal, &normal_maps),
    };
    let eval_path = out.join(EVAL_FILE);
    write_json(&eval_path, &summary)?;
    artifacts.push(eval_path);
    write_report(out, "eval", cfg, &artifacts, serde_json::to_value(&summary).unwrap())?;
    Ok(summary)
}
