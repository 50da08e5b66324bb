//! Folder datasets: `<root>/normal/*.png`, `<root>/anomalous/*.png` and
//! `<root>/gt/*.png` (same stems as the anomalous images).

use std::path::{Path, PathBuf};

use pnunet_core::{Image, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{list_images, load_image, stem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub normal_dir: PathBuf,
    #[serde(default)]
    pub anomalous_dir: Option<PathBuf>,
    #[serde(default)]
    pub ground_truth_dir: Option<PathBuf>,
    /// When set, must agree with the trainer's patch size.
    #[serde(default)]
    pub patch_size: Option<usize>,
    #[serde(default = "default_grayscale")]
    pub grayscale: bool,
}

fn default_grayscale() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: Image,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub normal: Vec<NamedImage>,
    pub anomalous: Vec<NamedImage>,
    /// Binary `H x W x 1` masks aligned with `anomalous`; empty when the
    /// spec has no ground-truth directory.
    pub ground_truth: Vec<Tensor>,
}

impl DatasetSpec {
    /// Standard layout under `root`; the optional folders are used only if
    /// they exist.
    pub fn from_root(root: &Path, grayscale: bool) -> Self {
        let optional = |name: &str| Some(root.join(name)).filter(|p| p.is_dir());
        DatasetSpec {
            normal_dir: root.join("normal"),
            anomalous_dir: optional("anomalous"),
            ground_truth_dir: optional("gt"),
            patch_size: None,
            grayscale,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let normal = load_dir(&self.normal_dir, self.grayscale)?;
        if normal.is_empty() {
            return Err(Error::format(&self.normal_dir, "no normal images"));
        }
        let anomalous = match &self.anomalous_dir {
            Some(dir) => load_dir(dir, self.grayscale)?,
            None => Vec::new(),
        };
        let ground_truth = match &self.ground_truth_dir {
            Some(dir) => load_ground_truth(dir, &anomalous)?,
            None => Vec::new(),
        };
        Ok(Dataset {
            normal,
            anomalous,
            ground_truth,
        })
    }
}

fn load_dir(dir: &Path, grayscale: bool) -> Result<Vec<NamedImage>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            Ok(NamedImage {
                name: stem(&p),
                image: load_image(&p, grayscale)?,
            })
        })
        .collect()
}

fn load_ground_truth(dir: &Path, anomalous: &[NamedImage]) -> Result<Vec<Tensor>> {
    let files = list_images(dir)?;
    anomalous
        .iter()
        .map(|a| {
            let path = files
                .iter()
                .find(|p| stem(p) == a.name)
                .ok_or_else(|| Error::format(dir, format!("no ground-truth mask for {}", a.name)))?;
            let mask = load_image(path, true)?;
            if (mask.height(), mask.width()) != (a.image.height(), a.image.width()) {
                return Err(Error::format(
                    path,
                    format!(
                        "mask is {}x{}, image is {}x{}",
                        mask.height(),
                        mask.width(),
                        a.image.height(),
                        a.image.width()
                    ),
                ));
            }
            Ok(mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
        })
        .collect()
}

impl Dataset {
    pub fn normal_images(&self) -> Vec<Image> {
        self.normal.iter().map(|n| n.image.clone()).collect()
    }

    pub fn anomalous_images(&self) -> Vec<Image> {
        self.anomalous.iter().map(|n| n.image.clone()).collect()
    }
}
