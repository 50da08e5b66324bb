//! Training driver: loads the dataset, runs the schedule and writes
//! checkpoints, mask dumps and the report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pnunet_core::noise::NoiseMaskPair;
use pnunet_core::trainer::{self, TrainState, TrainingData};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{save_f32, save_unit_png16};
use crate::report::{create_dir, write_report};
use crate::weights::save_reconstructor;

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub loss_history: Vec<f64>,
    pub mask_update_iterations: Vec<u64>,
    pub checkpoint_iterations: Vec<u64>,
    pub iteration_seconds: Vec<f64>,
    pub total_seconds: f64,
    pub final_weights: String,
    pub anomalous_images: usize,
    pub warnings: Vec<String>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub summary: TrainSummary,
    pub report_path: PathBuf,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration}.pnuw"))
}

/// `mask_p_<iter>.png/.f32` and `mask_n_<iter>.png/.f32`.
pub fn dump_masks(dir: &Path, masks: &NoiseMaskPair, iteration: u64) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (tag, map) in [("p", &masks.positive), ("n", &masks.negative)] {
        let png = dir.join(format!("mask_{tag}_{iteration}.png"));
        let raw = dir.join(format!("mask_{tag}_{iteration}.f32"));
        save_unit_png16(&png, map)?;
        save_f32(&raw, map)?;
        written.push(png);
        written.push(raw);
    }
    Ok(written)
}

/// Train per `cfg` into `cfg.output_dir`. Checkpoints (weights plus masks)
/// land every `checkpoint_every` iterations and after the last one; with
/// `dump_every_update` the masks are also dumped at each mask update.
pub fn run_training(cfg: &RunConfig, dump_every_update: bool) -> Result<TrainOutcome> {
    let spec = cfg.dataset()?;
    let dataset = spec.load()?;
    let data = TrainingData {
        normal: dataset.normal_images(),
        anomalous: dataset.anomalous_images(),
    };
    let out = &cfg.output_dir;
    create_dir(out)?;
    let tc = &cfg.trainer;
    let mut artifacts = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let mut timings = Vec::with_capacity(tc.iterations as usize);
    let started = Instant::now();
    let mut tick = Instant::now();
    let state = trainer::run::<Error>(&data, tc, cfg.reconstructor, &cfg.ssim, |state, updated| {
        timings.push(tick.elapsed().as_secs_f64());
        let it = state.iteration;
        let is_checkpoint = it % tc.checkpoint_every == 0 || it == tc.iterations;
        let write = || -> Result<Vec<PathBuf>> {
            let mut files = Vec::new();
            if is_checkpoint {
                let path = checkpoint_path(out, it);
                save_reconstructor(&path, &state.model)?;
                files.push(path);
            }
            if is_checkpoint || (updated && dump_every_update) {
                files.extend(dump_masks(out, &state.masks, it)?);
            }
            Ok(files)
        };
        let files = write().map_err(|e| Error::Checkpoint {
            source: Box::new(e),
            last_good: last_good.clone(),
        })?;
        if is_checkpoint {
            last_good = Some(checkpoint_path(out, it));
            checkpoints.push(it);
        }
        artifacts.extend(files);
        tick = Instant::now();
        Ok(())
    })?;
    let final_weights = checkpoint_path(out, tc.iterations);
    let summary = TrainSummary {
        loss_history: state.loss_history.clone(),
        mask_update_iterations: state.mask_update_iterations.clone(),
        checkpoint_iterations: checkpoints,
        iteration_seconds: timings,
        total_seconds: started.elapsed().as_secs_f64(),
        final_weights: final_weights.file_name().unwrap().to_string_lossy().into_owned(),
        anomalous_images: data.anomalous.len(),
        warnings: tc.warnings(),
    };
    let details = serde_json::to_value(&summary).expect("summary serializes");
    let report_path = write_report(out, "train", cfg, &artifacts, details)?;
    Ok(TrainOutcome {
        state,
        summary,
        report_path,
    })
}
