//! End-to-end runs of an [`ExperimentConfig`]: data loading, training and
//! the files written to the output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use protogrid_core::data::{append_noise_channel, DatasetSplit, SplitKind};
use protogrid_core::metrics::{Adjacency, Metrics};
use protogrid_core::model::Model;
use protogrid_core::parallel::Executor;
use protogrid_core::train::{derive_seed, evaluate_model, CycleRecord, TrainOutcome, Trainer, TransferMode};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, LoadedDataset};
use crate::error::{Error, Result};

pub const CHECKPOINT_NAME: &str = "model.pgckpt";
pub const HISTORY_NAME: &str = "history.jsonl";
pub const METRICS_NAME: &str = "metrics.json";
pub const CONFIG_NAME: &str = "config.toml";

/// Channel name given to the appended noise channel.
pub const NOISE_CHANNEL: &str = "noise";
const TAG_NOISE: u64 = 0x006e_6f69_7365;

/// Seed of the noise channel appended for a run with the given seed.
pub fn noise_seed(seed: u64) -> u64 {
    derive_seed(seed, &[TAG_NOISE])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub model_kind: String,
    pub best_cycle: usize,
    pub best_val_accuracy: f64,
    pub validation: Metrics,
    pub test: Metrics,
}

pub struct RunOutputs {
    pub dir: PathBuf,
    pub checkpoint: Checkpoint,
    pub summary: RunSummary,
    pub history: Vec<CycleRecord>,
    pub data: LoadedDataset,
}

/// Loads the dataset of a run, appending the noise channel when configured.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<LoadedDataset> {
    let mut data = load_dataset(&cfg.data)?;
    if cfg.noise_channel {
        data.split = append_noise_channel(&data.split, noise_seed(cfg.seed))?;
    }
    Ok(data)
}

/// Makes `split` match the channels a checkpoint was trained on, appending
/// the noise channel if the checkpoint has one that the data lacks.
pub fn align_channels(split: DatasetSplit, ckpt: &Checkpoint) -> Result<DatasetSplit> {
    let want = &ckpt.channel_names;
    let split = if want.len() == split.channels() + 1 && want.last().map(String::as_str) == Some(NOISE_CHANNEL) {
        let seed = ckpt.train.as_ref().map_or(1, |t| t.seed);
        append_noise_channel(&split, noise_seed(seed))?
    } else {
        split
    };
    if &split.channel_names != want {
        return Err(Error::Usage(format!(
            "checkpoint expects channels {want:?}, dataset has {:?}",
            split.channel_names
        )));
    }
    let input = ckpt.model.input();
    if split.shape() != Some((input.height, input.width, input.channels)) {
        return Err(Error::Usage(format!(
            "checkpoint expects {}x{}x{} rasters, dataset has {:?}",
            input.height,
            input.width,
            input.channels,
            split.shape()
        )));
    }
    if split.num_classes != ckpt.model.classes() {
        return Err(Error::Usage(format!(
            "checkpoint has {} classes, dataset {}",
            ckpt.model.classes(),
            split.num_classes
        )));
    }
    Ok(split)
}

fn check_prototype_total(cfg: &ExperimentConfig, split: &DatasetSplit) -> Result<()> {
    let Some(total) = cfg.total_prototypes else {
        return Ok(());
    };
    let groups = if cfg.model_kind.per_channel() { split.channels() } else { 1 };
    let have = groups * split.num_classes * cfg.prototypes_per_class;
    if have != total {
        return Err(Error::Config(format!(
            "total_prototypes = {total} but {groups} groups x {} classes x {} per class = {have}",
            split.num_classes, cfg.prototypes_per_class
        )));
    }
    Ok(())
}

/// Trains the configured model and writes the checkpoint, history, metrics
/// and a copy of the configuration into `cfg.output_dir`. `resume` starts
/// from a saved model with fresh optimiser state.
pub fn run_experiment<E: Executor>(cfg: &ExperimentConfig, resume: Option<&Path>, exec: &E) -> Result<RunOutputs> {
    let data = prepare_data(cfg)?;
    let split = &data.split;
    if cfg.model_kind != protogrid_core::model::ModelKind::StandardNn {
        check_prototype_total(cfg, split)?;
    }
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let train_cfg = cfg.train_config();
    std::fs::write(dir.join(CONFIG_NAME), cfg.to_toml()).map_err(Error::io(dir.join(CONFIG_NAME)))?;

    let trainer = match (resume, cfg.transfer) {
        (Some(path), _) => {
            let ckpt = load_checkpoint(path)?;
            log::info!("resuming from {}", path.display());
            Trainer::<f32, E>::with_model(train_cfg.clone(), ckpt.model, split, exec)?
        }
        (None, TransferMode::None) => Trainer::new(train_cfg.clone(), split, exec)?,
        (None, mode) => {
            let path = cfg
                .pretrained
                .as_ref()
                .ok_or_else(|| Error::Config(format!("transfer = {mode:?} needs a pretrained checkpoint")))?;
            let ckpt = load_checkpoint(path)?;
            log::info!("encoder from {} ({mode:?})", path.display());
            let enc = ckpt.model.encoder();
            Trainer::with_pretrained_encoder(train_cfg.clone(), &enc.params, &enc.config, split, exec)?
        }
    };
    let history_path = dir.join(HISTORY_NAME);
    let mut history_file = BufWriter::new(File::create(&history_path).map_err(Error::io(&history_path))?);
    let mut write_err = None;
    let outcome: TrainOutcome<f32> = trainer.run(&mut |rec: &CycleRecord| {
        log::info!(
            "cycle {:>3} {:?} stage1 {} stage3 {} val {:.4}{}{}",
            rec.cycle,
            rec.phase,
            rec.stage1.map_or("-".into(), |p| format!("{:.4}", p.total)),
            rec.stage3_loss.map_or("-".into(), |l| format!("{l:.4}")),
            rec.val_accuracy,
            if rec.projected { " projected" } else { "" },
            if rec.best { " best" } else { "" },
        );
        let line = serde_json::to_string(rec).expect("history records serialise");
        if let Err(e) = writeln!(history_file, "{line}").and_then(|_| history_file.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::Io { path: history_path, source: e });
    }
    drop(history_file);

    let adjacency = cfg.adjacency();
    let summary = summarize(cfg, &outcome, split, adjacency, exec)?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        channel_names: split.channel_names.clone(),
        class_names: data.manifest.class_names.clone(),
        train: Some(train_cfg),
    };
    save_checkpoint(dir.join(CHECKPOINT_NAME), &checkpoint)?;
    let metrics_path = dir.join(METRICS_NAME);
    let text = serde_json::to_string_pretty(&summary).expect("metrics serialise");
    std::fs::write(&metrics_path, text + "\n").map_err(Error::io(&metrics_path))?;
    Ok(RunOutputs { dir, checkpoint, summary, history: outcome.history, data })
}

fn summarize<E: Executor>(
    cfg: &ExperimentConfig,
    outcome: &TrainOutcome<f32>,
    split: &DatasetSplit,
    adjacency: Option<Adjacency>,
    exec: &E,
) -> Result<RunSummary> {
    let eval = |kind: SplitKind| -> Result<Metrics> {
        let samples: Vec<_> = split.samples(kind).iter().collect();
        Ok(evaluate_model(&outcome.model, &samples, adjacency, exec)?)
    };
    Ok(RunSummary {
        name: cfg.name.clone(),
        model_kind: cfg.model_kind.as_str().to_string(),
        best_cycle: outcome.best_cycle,
        best_val_accuracy: outcome.best_val_accuracy,
        validation: eval(SplitKind::Validation)?,
        test: eval(SplitKind::Test)?,
    })
}

/// Metrics of a saved model on one split of a dataset.
pub fn evaluate_checkpoint<E: Executor>(
    model: &Model<f32>,
    split: &DatasetSplit,
    kind: SplitKind,
    adjacency: Option<Adjacency>,
    exec: &E,
) -> Result<Metrics> {
    let samples: Vec<_> = split.samples(kind).iter().collect();
    Ok(evaluate_model(model, &samples, adjacency, exec)?)
}
