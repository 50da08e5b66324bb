//! Synthetic defect corpus on disk.
//!
//! ```text
//! <out>/train/normal/*.png
//! <out>/train/anomalous/*.png   <out>/train/gt/*.png
//! <out>/test/normal/*.png
//! <out>/test/anomalous/*.png    <out>/test/gt/*.png
//! <out>/manifest.json
//! ```

use std::path::{Path, PathBuf};

use pnunet_core::imaging::{gen_synthetic_pair, procedural_texture, SyntheticDefectSpec};
use serde::Serialize;

use crate::config::{GenDataConfig, RunConfig};
use crate::error::Result;
use crate::io::save_image;
use crate::report::{create_dir, write_json, write_report};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub ground_truth: Option<String>,
    pub texture_seed: u64,
    pub defect: Option<SyntheticDefectSpec>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config: GenDataConfig,
    pub images: Vec<ManifestEntry>,
}

/// Seeds are laid out so every (split, class, index) gets its own texture.
fn texture_seed(base: u64, split: u64, index: usize) -> u64 {
    (base << 24) | (split << 20) | index as u64
}

pub fn generate(cfg: &GenDataConfig, out: &Path) -> Result<(Manifest, Vec<PathBuf>)> {
    let side = cfg.image_size;
    let mut images = Vec::new();
    let mut files = Vec::new();
    let splits = [
        ("train", cfg.train_normal, cfg.train_anomalous, 0),
        ("test", cfg.test_normal, cfg.test_anomalous, 2),
    ];
    for (split, n_normal, n_anomalous, code) in splits {
        let normal_dir = out.join(split).join("normal");
        create_dir(&normal_dir)?;
        for i in 0..n_normal {
            let seed = texture_seed(cfg.seed, code, i);
            let img = procedural_texture(side, side, cfg.channels, seed)?;
            let path = normal_dir.join(format!("normal_{i:03}.png"));
            save_image(&path, &img)?;
            images.push(ManifestEntry {
                path: relative(out, &path),
                ground_truth: None,
                texture_seed: seed,
                defect: None,
            });
            files.push(path);
        }
        if n_anomalous == 0 {
            continue;
        }
        let anomalous_dir = out.join(split).join("anomalous");
        let gt_dir = out.join(split).join("gt");
        create_dir(&anomalous_dir)?;
        create_dir(&gt_dir)?;
        for i in 0..n_anomalous {
            let seed = texture_seed(cfg.seed, code + 1, i);
            let base = procedural_texture(side, side, cfg.channels, seed)?;
            let spec = SyntheticDefectSpec {
                kind: cfg.kinds[i % cfg.kinds.len()],
                intensity: cfg.intensity,
                size_px: cfg.size_px,
                seed,
            };
            let (defective, mask) = gen_synthetic_pair(&base, &spec)?;
            let name = format!("anomalous_{i:03}.png");
            let path = anomalous_dir.join(&name);
            let gt = gt_dir.join(&name);
            save_image(&path, &defective)?;
            save_image(&gt, &mask)?;
            images.push(ManifestEntry {
                path: relative(out, &path),
                ground_truth: Some(relative(out, &gt)),
                texture_seed: seed,
                defect: Some(spec),
            });
            files.push(path);
            files.push(gt);
        }
    }
    Ok((
        Manifest {
            config: cfg.clone(),
            images,
        },
        files,
    ))
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

/// The `gen-data` command.
pub fn run_gen_data(cfg: &RunConfig) -> Result<Manifest> {
    let out = &cfg.output_dir;
    create_dir(out)?;
    let (manifest, mut files) = generate(&cfg.gen_data, out)?;
    let path = out.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    files.push(path);
    write_report(out, "gen-data", cfg, &files, serde_json::json!({"images": manifest.images.len()}))?;
    Ok(manifest)
}
