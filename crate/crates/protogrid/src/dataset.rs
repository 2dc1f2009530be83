//! Dataset manifests and their tensor files.
//!
//! A manifest is a flat TOML table:
//!
//! ```toml
//! format = "protogrid-dataset/1"
//! num_classes = 10
//! channel_names = ["free_digit", "even_digit", "odd_digit"]
//! class_names = ["zero", "one"]        # optional
//! standardize = false                   # per-channel, train statistics
//! uint8_divisor = 255.0                 # optional, for u8 pixel tensors
//! train_pixels = "train_pixels.pgt"     # N x H x W x C
//! train_labels = "train_labels.pgt"     # N, integer valued
//! train_ids = "train_ids.pgt"           # optional, N, integer valued
//! # validation_* and test_* likewise
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use protogrid_core::data::{unit_pixel, DatasetSplit, RasterSample};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::{load_tensor, save_tensor, Tensor, TensorData};

pub const FORMAT: &str = "protogrid-dataset/1";
pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub num_classes: usize,
    pub channel_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uint8_divisor: Option<f64>,
    pub train_pixels: String,
    pub train_labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ids: Option<String>,
    pub validation_pixels: String,
    pub validation_labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_ids: Option<String>,
    pub test_pixels: String,
    pub test_labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_ids: Option<String>,
}

/// A loaded dataset together with its manifest.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub split: DatasetSplit,
    /// `(mean, std)` per channel when standardisation was applied.
    pub standardization: Option<Vec<(f64, f64)>>,
}

impl LoadedDataset {
    /// Class index for a class name or a decimal label.
    pub fn class_index(&self, name: &str) -> Option<usize> {
        if let Some(names) = &self.manifest.class_names {
            if let Some(i) = names.iter().position(|n| n == name) {
                return Some(i);
            }
        }
        name.parse().ok().filter(|&k: &usize| k < self.split.num_classes)
    }
}

fn manifest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Manifest { path: path.to_path_buf(), detail: detail.into() }
}

fn integers(t: &Tensor, path: &Path, what: &str) -> Result<Vec<u64>> {
    if t.dims.len() != 1 {
        return Err(manifest_err(path, format!("{what} must be rank 1, got dims {:?}", t.dims)));
    }
    t.data
        .to_f64()
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 {
                Ok(v as u64)
            } else {
                Err(manifest_err(path, format!("{what}[{i}] = {v} is not a non-negative integer")))
            }
        })
        .collect()
}

fn load_split(
    dir: &Path,
    manifest: &DatasetManifest,
    name: &str,
    files: (&str, &str, Option<&str>),
    first_id: u64,
) -> Result<Vec<RasterSample>> {
    let (px_file, lab_file, id_file) = files;
    let px_path = dir.join(px_file);
    let pixels = load_tensor(&px_path)?;
    if pixels.dims.len() != 4 {
        return Err(manifest_err(&px_path, format!("{name} pixels must be N x H x W x C, got {:?}", pixels.dims)));
    }
    let (n, h, w, c) = (pixels.dims[0], pixels.dims[1], pixels.dims[2], pixels.dims[3]);
    if n == 0 {
        return Err(manifest_err(&px_path, format!("{name} split is empty")));
    }
    if c != manifest.channel_names.len() {
        return Err(manifest_err(
            &px_path,
            format!("{name} pixels have {c} channels, manifest names {}", manifest.channel_names.len()),
        ));
    }
    let lab_path = dir.join(lab_file);
    let labels = integers(&load_tensor(&lab_path)?, &lab_path, "labels")?;
    if labels.len() != n {
        return Err(manifest_err(&lab_path, format!("{} labels for {n} {name} samples", labels.len())));
    }
    let ids = match id_file {
        Some(f) => {
            let p = dir.join(f);
            let ids = integers(&load_tensor(&p)?, &p, "ids")?;
            if ids.len() != n {
                return Err(manifest_err(&p, format!("{} ids for {n} {name} samples", ids.len())));
            }
            ids
        }
        None => (first_id..first_id + n as u64).collect(),
    };
    let per = h * w * c;
    let values: Vec<f32> = match &pixels.data {
        TensorData::F32(v) => v.clone(),
        TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        TensorData::U8(v) => match manifest.uint8_divisor {
            Some(255.0) => v.iter().map(|&b| unit_pixel(b)).collect(),
            Some(d) => v.iter().map(|&b| (b as f64 / d) as f32).collect(),
            None => v.iter().map(|&b| b as f32).collect(),
        },
    };
    let mut out = Vec::with_capacity(n);
    for (i, chunk) in values.chunks_exact(per).enumerate() {
        let label = labels[i] as usize;
        if label >= manifest.num_classes {
            return Err(manifest_err(
                &lab_path,
                format!("{name} sample {i} has label {label}, expected < {}", manifest.num_classes),
            ));
        }
        out.push(RasterSample::new(ids[i], label, h, w, c, chunk.to_vec())?);
    }
    Ok(out)
}

/// Reads a dataset manifest and its tensors. Paths are resolved relative
/// to `dir`.
pub fn load_raster_dataset(dir: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let dir = dir.as_ref();
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(Error::io(manifest_path))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| manifest_err(manifest_path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(manifest_err(manifest_path, format!("format {:?}, expected {FORMAT:?}", manifest.format)));
    }
    if manifest.num_classes == 0 || manifest.channel_names.is_empty() {
        return Err(manifest_err(manifest_path, "num_classes and channel_names must be nonempty"));
    }
    let train = load_split(
        dir,
        &manifest,
        "train",
        (&manifest.train_pixels, &manifest.train_labels, manifest.train_ids.as_deref()),
        0,
    )?;
    let validation = load_split(
        dir,
        &manifest,
        "validation",
        (&manifest.validation_pixels, &manifest.validation_labels, manifest.validation_ids.as_deref()),
        train.len() as u64,
    )?;
    let test = load_split(
        dir,
        &manifest,
        "test",
        (&manifest.test_pixels, &manifest.test_labels, manifest.test_ids.as_deref()),
        (train.len() + validation.len()) as u64,
    )?;
    let mut split = DatasetSplit {
        train,
        validation,
        test,
        num_classes: manifest.num_classes,
        channel_names: manifest.channel_names.clone(),
    };
    split.validate()?;
    for (name, st) in manifest.channel_names.iter().zip(split.channel_stats()) {
        log::info!("channel {name}: min {:.4} max {:.4} mean {:.4}", st.min, st.max, st.mean);
    }
    let standardization = manifest.standardize.then(|| split.standardize());
    Ok(LoadedDataset { manifest, split, standardization })
}

/// Loads a manifest file, resolving tensors next to it.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    load_raster_dataset(dir, manifest_path)
}

fn pixel_tensor(samples: &[RasterSample], as_bytes: bool) -> Result<Tensor> {
    let (h, w, c) = samples[0].shape();
    let dims = vec![samples.len(), h, w, c];
    let values = samples.iter().flat_map(|s| s.pixels.iter().copied());
    let data = if as_bytes {
        TensorData::U8(values.map(|v| (v * 255.0).round() as u8).collect())
    } else {
        TensorData::F32(values.collect())
    };
    Tensor::new(dims, data)
}

/// Whether every pixel is exactly `b / 255` for some byte `b`.
fn byte_valued(split: &DatasetSplit) -> bool {
    split.all().flat_map(|s| &s.pixels).all(|&v| {
        let b = (v * 255.0).round();
        (0.0..=255.0).contains(&b) && unit_pixel(b as u8) == v
    })
}

/// Writes every split plus a manifest into `dir`. Byte-valued pixels are
/// stored as u8 with divisor 255, anything else as binary32.
pub fn save_dataset(dir: impl AsRef<Path>, split: &DatasetSplit, class_names: Option<Vec<String>>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    split.validate()?;
    let as_bytes = byte_valued(split);
    for (name, samples) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        save_tensor(dir.join(format!("{name}_pixels.pgt")), &pixel_tensor(samples, as_bytes)?)?;
        let labels = samples.iter().map(|s| s.label as f64).collect();
        save_tensor(dir.join(format!("{name}_labels.pgt")), &Tensor::new(vec![samples.len()], TensorData::F64(labels))?)?;
        let ids = samples.iter().map(|s| s.id as f64).collect();
        save_tensor(dir.join(format!("{name}_ids.pgt")), &Tensor::new(vec![samples.len()], TensorData::F64(ids))?)?;
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        num_classes: split.num_classes,
        channel_names: split.channel_names.clone(),
        class_names,
        standardize: false,
        uint8_divisor: as_bytes.then_some(255.0),
        train_pixels: "train_pixels.pgt".into(),
        train_labels: "train_labels.pgt".into(),
        train_ids: Some("train_ids.pgt".into()),
        validation_pixels: "validation_pixels.pgt".into(),
        validation_labels: "validation_labels.pgt".into(),
        validation_ids: Some("validation_ids.pgt".into()),
        test_pixels: "test_pixels.pgt".into(),
        test_labels: "test_labels.pgt".into(),
        test_ids: Some("test_ids.pgt".into()),
    };
    let path = dir.join(MANIFEST_NAME);
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(Error::io(&path))?;
    Ok(path)
}
