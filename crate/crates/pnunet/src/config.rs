//! The run configuration: one strict JSON document plus `key.path=value`
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use pnunet_core::baseline::{AutoencoderConfig, SearchConfig};
use pnunet_core::detector::{MapMode, DEFAULT_PERCENTILE, DEFAULT_SMOOTH_SIGMA};
use pnunet_core::imaging::DefectKind;
use pnunet_core::reconstructor::ReconstructorConfig;
use pnunet_core::ssim::SsimConfig;
use pnunet_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: Option<DatasetSpec>,
    pub trainer: TrainConfig,
    pub ssim: SsimConfig,
    pub reconstructor: ReconstructorConfig,
    pub autoencoder: AutoencoderConfig,
    pub search: SearchConfig,
    pub detector: DetectorConfig,
    pub bench: BenchConfig,
    pub gen_data: GenDataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/latest"),
            dataset: None,
            trainer: TrainConfig::default(),
            ssim: SsimConfig::default(),
            reconstructor: ReconstructorConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            search: SearchConfig::default(),
            detector: DetectorConfig::default(),
            bench: BenchConfig::default(),
            gen_data: GenDataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Reconstructor weights used by `infer`, `eval` and `bench`.
    pub weights: Option<PathBuf>,
    /// Folder processed by `infer`.
    pub input_dir: Option<PathBuf>,
    pub smooth_sigma: f64,
    pub map_mode: MapMode,
    pub percentile: f64,
    /// Fixed binarization threshold; when absent it is chosen from the
    /// dataset's normal images at `percentile`.
    pub threshold: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            weights: None,
            input_dir: None,
            smooth_sigma: DEFAULT_SMOOTH_SIGMA,
            map_mode: MapMode::AbsDiff,
            percentile: DEFAULT_PERCENTILE,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub images: usize,
    pub image_size: usize,
    pub autoencoder_weights: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            images: 10,
            image_size: 64,
            autoencoder_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub image_size: usize,
    pub channels: usize,
    pub train_normal: usize,
    pub train_anomalous: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub kinds: Vec<DefectKind>,
    pub intensity: f64,
    pub size_px: usize,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            image_size: 64,
            channels: 1,
            train_normal: 16,
            train_anomalous: 4,
            test_normal: 8,
            test_anomalous: 20,
            kinds: vec![DefectKind::Scratch, DefectKind::Blob],
            intensity: 0.15,
            size_px: 14,
            seed: 0,
        }
    }
}

/// Set `dotted.key` inside `root` to `raw`, parsed as JSON when it is valid
/// JSON and taken as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().unwrap()
            }
            _ => return Err(Error::config(parts[..i].join("."), "not an object")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split always yields a segment")
}

impl RunConfig {
    /// Parse `document` after applying `overrides` in order. Errors carry
    /// the dotted path of the offending key.
    pub fn from_value(mut document: Value, overrides: &[String]) -> Result<Self> {
        if !document.is_object() {
            return Err(Error::config("", "config must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut document, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(document).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let document = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config("", format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config("", format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(document, overrides)
    }

    /// Range checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let at = |section: &'static str| move |e: pnunet_core::Error| Error::config(section, e.to_string());
        self.trainer.validate().map_err(at("trainer"))?;
        self.ssim.validate().map_err(at("ssim"))?;
        self.reconstructor.validate().map_err(at("reconstructor"))?;
        self.autoencoder.validate().map_err(at("autoencoder"))?;
        self.search.validate().map_err(at("search"))?;
        if let Some(ds) = &self.dataset {
            if let Some(p) = ds.patch_size.filter(|&p| p != self.trainer.patch_size) {
                return Err(Error::config(
                    "dataset.patch_size",
                    format!("{p} disagrees with trainer.patch_size {}", self.trainer.patch_size),
                ));
            }
        }
        let d = &self.detector;
        if !(d.smooth_sigma >= 0.0 && d.smooth_sigma.is_finite()) {
            return Err(Error::config("detector.smooth_sigma", "must be a finite value >= 0"));
        }
        if !(d.percentile > 0.0 && d.percentile < 100.0) {
            return Err(Error::config("detector.percentile", "must lie strictly between 0 and 100"));
        }
        if self.bench.images == 0 {
            return Err(Error::config("bench.images", "must be positive"));
        }
        let g = &self.gen_data;
        if g.channels != 1 && g.channels != 3 {
            return Err(Error::config("gen_data.channels", "must be 1 or 3"));
        }
        if g.kinds.is_empty() {
            return Err(Error::config("gen_data.kinds", "needs at least one defect kind"));
        }
        if !(0.0..=1.0).contains(&g.intensity) {
            return Err(Error::config("gen_data.intensity", "must lie in [0, 1]"));
        }
        if g.size_px == 0 || g.size_px > g.image_size {
            return Err(Error::config("gen_data.size_px", "must be in 1..=image_size"));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&DatasetSpec> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::config("dataset", "this command needs a dataset section"))
    }

    /// Every seed that influences a run, by config path.
    pub fn seeds(&self) -> Value {
        serde_json::json!({
            "trainer.seed": self.trainer.seed,
            "reconstructor.seed": self.reconstructor.seed,
            "autoencoder.seed": self.autoencoder.seed,
            "search.seed": self.search.seed,
            "gen_data.seed": self.gen_data.seed,
        })
    }

    /// Overrides that set every seed to `seed`.
    pub fn seed_overrides(seed: u64) -> Vec<String> {
        ["trainer", "reconstructor", "autoencoder", "search", "gen_data"]
            .iter()
            .map(|s| format!("{s}.seed={seed}"))
            .collect()
    }
}
