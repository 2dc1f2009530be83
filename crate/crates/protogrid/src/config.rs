//! Experiment configuration files: flat TOML, unknown keys rejected.

use std::path::{Path, PathBuf};

use protogrid_core::encoder::{EncoderConfig, StageConfig};
use protogrid_core::head::LossConfig;
use protogrid_core::model::ModelKind;
use protogrid_core::train::{TrainConfig, TransferMode};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn d_kernel() -> usize {
    3
}
fn d_slope() -> f64 {
    0.01
}
fn d_dropout() -> f64 {
    0.2
}
fn d_epsilon() -> f64 {
    1e-4
}
fn d_patience() -> usize {
    8
}
fn d_max_cycles() -> usize {
    40
}
fn d_top_k() -> usize {
    3
}
fn d_near_zero() -> f64 {
    1e-3
}
fn d_head_init() -> f64 {
    0.01
}
fn d_clip() -> f64 {
    5.0
}
fn d_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model_kind: ModelKind,
    /// Dataset manifest.
    pub data: PathBuf,
    pub output_dir: PathBuf,
    /// Append a uniform-noise channel before training.
    #[serde(default)]
    pub noise_channel: bool,
    #[serde(default = "d_seed")]
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub projection_period: usize,
    #[serde(default = "d_max_cycles")]
    pub max_cycles: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default)]
    pub extra_stage3_epochs: usize,
    pub encoder_channels: Vec<usize>,
    /// Embedding grid `[h, w]`.
    pub embedding: [usize; 2],
    #[serde(default = "d_kernel")]
    pub kernel: usize,
    /// Pool size of each stage; 1 disables pooling. Defaults to 2 everywhere.
    #[serde(default)]
    pub stage_pool: Option<Vec<usize>>,
    #[serde(default = "d_slope")]
    pub negative_slope: f64,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub prototypes_per_class: usize,
    /// Expected prototype count, checked against the data when given.
    #[serde(default)]
    pub total_prototypes: Option<usize>,
    #[serde(default)]
    pub location_scaling: bool,
    #[serde(default)]
    pub l1: f64,
    #[serde(default)]
    pub cluster: f64,
    #[serde(default)]
    pub separation: f64,
    #[serde(default)]
    pub diversity: f64,
    #[serde(default)]
    pub diversity_threshold: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_head_init")]
    pub head_init_range: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub transfer: TransferMode,
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    /// Adjacency for the plus-or-minus-one metric, e.g. `"cyclic:1-8"`.
    #[serde(default)]
    pub plus_minus_one: Option<String>,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    #[serde(default = "d_near_zero")]
    pub near_zero: f64,
    #[serde(default)]
    pub threads: Option<usize>,
}

/// Bundled presets, by file name.
pub const PRESETS: &[(&str, &str)] = &[
    ("mnist.cfg", include_str!("../configs/mnist.cfg")),
    ("mnist_standard.cfg", include_str!("../configs/mnist_standard.cfg")),
    ("mnist_joint.cfg", include_str!("../configs/mnist_joint.cfg")),
    ("mnist_noise.cfg", include_str!("../configs/mnist_noise.cfg")),
    ("mnist_frozen.cfg", include_str!("../configs/mnist_frozen.cfg")),
    ("mnist_unfrozen.cfg", include_str!("../configs/mnist_unfrozen.cfg")),
    ("mjo.cfg", include_str!("../configs/mjo.cfg")),
    ("eurosat.cfg", include_str!("../configs/eurosat.cfg")),
];

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| parse(text).expect("bundled presets parse"))
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl ExperimentConfig {
    fn check(&self) -> Result<()> {
        if let Some(p) = &self.stage_pool {
            if p.len() != self.encoder_channels.len() {
                return Err(Error::Config("stage_pool needs one entry per encoder stage".into()));
            }
        }
        if let Some(spec) = &self.plus_minus_one {
            parse_adjacency(spec)?;
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        let stages = self
            .encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let pool = self.stage_pool.as_ref().map_or(2, |p| p[i]);
                StageConfig {
                    out_channels: c,
                    kernel: self.kernel,
                    stride: 1,
                    padding: self.kernel / 2,
                    pool,
                    pool_stride: pool.max(1),
                }
            })
            .collect();
        EncoderConfig {
            in_channels: 1,
            stages,
            negative_slope: self.negative_slope,
            embedding_h: self.embedding[0],
            embedding_w: self.embedding[1],
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model_kind: self.model_kind,
            encoder: self.encoder(),
            prototypes_per_class: self.prototypes_per_class,
            location_scaling: self.location_scaling,
            loss: LossConfig {
                cluster: self.cluster,
                separation: self.separation,
                diversity: self.diversity,
                diversity_threshold: self.diversity_threshold,
                l1: self.l1,
            },
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            projection_period: self.projection_period,
            max_cycles: self.max_cycles,
            patience: self.patience,
            extra_stage3_epochs: self.extra_stage3_epochs,
            seed: self.seed,
            head_init_range: self.head_init_range,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            transfer: self.transfer,
            pretrained: self.pretrained.as_ref().map(|p| p.display().to_string()),
        }
    }

    pub fn adjacency(&self) -> Option<protogrid_core::metrics::Adjacency> {
        self.plus_minus_one.as_deref().map(|s| parse_adjacency(s).expect("checked on load"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }
}

/// Parses `cyclic:FIRST-LAST`.
pub fn parse_adjacency(spec: &str) -> Result<protogrid_core::metrics::Adjacency> {
    let bad = || Error::Config(format!("adjacency {spec:?} is not of the form cyclic:FIRST-LAST"));
    let range = spec.strip_prefix("cyclic:").ok_or_else(bad)?;
    let (a, b) = range.split_once('-').ok_or_else(bad)?;
    let first: usize = a.trim().parse().map_err(|_| bad())?;
    let last: usize = b.trim().parse().map_err(|_| bad())?;
    if first >= last {
        return Err(bad());
    }
    Ok(protogrid_core::metrics::Adjacency { first, last })
}
