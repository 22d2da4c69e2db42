//! PNG ingestion and dataset manifests.
//!
//! A dataset directory holds pairs named `<base>_degraded.png` and
//! `<base>_clean.png`; pairs are matched by `<base>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{ColorType, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Dataset, DegradationSpec, ImagePair, Split, Task};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CLEAN_SUFFIX: &str = "_clean.png";
pub const DEGRADED_SUFFIX: &str = "_degraded.png";

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::Data(format!(
            "{} is {:?}; only 8-bit RGB images are supported",
            path.display(),
            img.color()
        )));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Writes a [0,1] RGB tensor as an 8-bit PNG (values clamped, rounded).
pub fn save_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    let bytes = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads every `<base>_degraded.png` / `<base>_clean.png` pair, sorted by base name.
/// Files without a partner are skipped with a warning.
pub fn load_png_dir(dir: &Path, task: Task, split: Split) -> Result<Dataset> {
    let mut degraded = BTreeMap::new();
    let mut clean = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(base) = name.strip_suffix(DEGRADED_SUFFIX) {
            degraded.insert(base.to_string(), path.clone());
        } else if let Some(base) = name.strip_suffix(CLEAN_SUFFIX) {
            clean.insert(base.to_string(), path.clone());
        }
    }
    for base in degraded.keys().filter(|b| !clean.contains_key(*b)) {
        log::warn!("skipping {base}{DEGRADED_SUFFIX}: no matching clean image");
    }
    for base in clean.keys().filter(|b| !degraded.contains_key(*b)) {
        log::warn!("skipping {base}{CLEAN_SUFFIX}: no matching degraded image");
    }
    let mut pairs = Vec::new();
    for (base, dpath) in &degraded {
        let Some(cpath) = clean.get(base) else { continue };
        let d = load_png(dpath)?;
        let c = load_png(cpath)?;
        if d.shape() != c.shape() {
            return Err(Error::Data(format!(
                "{} is {:?} but {} is {:?}",
                dpath.display(),
                d.shape(),
                cpath.display(),
                c.shape()
            )));
        }
        let mut pair = ImagePair::new(d, c, task)?;
        pair.source = base.clone();
        pairs.push(pair);
    }
    Ok(Dataset::new(pairs, split))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    pub split: Split,
    pub task: Task,
    pub spec: Option<DegradationSpec>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub copy: u32,
    pub degraded: String,
    pub clean: String,
}

/// Writes a dataset as PNG pairs plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(dataset.len());
    for (i, pair) in dataset.pairs.iter().enumerate() {
        let base = format!("{}_{i:04}", pair.task.name());
        let (dname, cname) = (format!("{base}{DEGRADED_SUFFIX}"), format!("{base}{CLEAN_SUFFIX}"));
        save_png(&dir.join(&dname), &pair.degraded)?;
        save_png(&dir.join(&cname), &pair.clean)?;
        manifest.push(ManifestEntry {
            source: pair.source.clone(),
            split: dataset.split,
            task: pair.task,
            spec: pair.spec.clone(),
            seed: pair.spec.as_ref().map(|s| s.seed),
            copy: pair.copy,
            degraded: dname,
            clean: cname,
        });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads a directory written by [`write_dataset`], taking tasks, specs and
/// duplicate indices from its manifest (order preserved).
pub fn load_manifest_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let split = manifest.first().map(|m| m.split).unwrap_or(Split::Train);
    let pairs = manifest
        .into_iter()
        .map(|m| {
            let d = load_png(&dir.join(&m.degraded))?;
            let c = load_png(&dir.join(&m.clean))?;
            if d.shape() != c.shape() {
                return Err(Error::Data(format!("{} and {} differ in size", m.degraded, m.clean)));
            }
            Ok(ImagePair {
                degraded: d,
                clean: c,
                task: m.task,
                source: m.source,
                spec: m.spec,
                copy: m.copy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(pairs, split))
}
