use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use protogrid::checkpoint::{load_checkpoint, Checkpoint};
use protogrid::config::{self, parse_adjacency};
use protogrid::core::data::{generate_synthetic_mnist, DatasetSplit, SplitKind, SYNTHETIC_CHANNELS};
use protogrid::core::explain::{global_explanation, local_explanation_with_fields, receptive_fields};
use protogrid::core::model::ProtoNet;
use protogrid::core::train::batched_logits;
use protogrid::dataset::{load_dataset, save_dataset};
use protogrid::exec::{resolve_threads, Pool, THREADS_ENV};
use protogrid::experiment::{align_channels, evaluate_checkpoint, run_experiment};
use protogrid::mnist::load_mnist;
use protogrid::report::{render_global_report, render_local_reports, ReportMeta};
use protogrid::tensor_file::{save_tensor, Tensor, TensorData};
use protogrid::{Error, Result};

#[derive(Parser)]
#[command(name = "protogrid", version, about = "Channel-specific prototype networks for gridded multi-channel data")]
struct Cli {
    /// Worker threads (default: PROTOGRID_THREADS, then all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    SyntheticMnist,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Validation,
    Test,
}

impl From<Split> for SplitKind {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitKind::Train,
            Split::Validation => SplitKind::Validation,
            Split::Test => SplitKind::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset on disk.
    GenerateData {
        #[arg(long, value_enum, default_value = "synthetic-mnist")]
        task: Task,
        /// Directory with MNIST IDX files (optionally gzipped).
        #[arg(long)]
        mnist: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 12000)]
        n_total: usize,
    },
    /// Train a model from an experiment configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint with fresh optimiser state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on a dataset split, as JSON.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Also report plus-or-minus-one accuracy, e.g. `cyclic:1-8`.
        #[arg(long)]
        plus_minus_one: Option<String>,
        /// Write the metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the split's logits as a tensor file.
        #[arg(long)]
        logits_out: Option<PathBuf>,
    },
    /// Local explanation of one sample.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample ids; repeat or separate with commas.
        #[arg(long, required = true, value_delimiter = ',')]
        sample: Vec<u64>,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Head-weight summary and top-prototype frequencies.
    GlobalReport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Class names or labels to restrict the frequency table to.
        #[arg(long, value_delimiter = ',')]
        class_group: Option<Vec<String>>,
        #[arg(long, default_value_t = 1e-3)]
        near_zero: f64,
    },
}

fn pool(threads: Option<usize>) -> Result<Pool> {
    Pool::new(resolve_threads(threads)?)
}

fn prototype_net(ckpt: &Checkpoint) -> Result<&ProtoNet<f32>> {
    ckpt.model
        .as_prototype()
        .ok_or_else(|| Error::Usage("explanations need a prototype model, this checkpoint is a standard network".into()))
}

fn meta(ckpt_path: &Path, ckpt: &Checkpoint) -> ReportMeta {
    ReportMeta {
        checkpoint: Some(ckpt_path.display().to_string()),
        channel_names: ckpt.channel_names.clone(),
        class_names: ckpt.class_names.clone(),
    }
}

fn load_pair(ckpt_path: &Path, data_path: &Path) -> Result<(Checkpoint, DatasetSplit)> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = load_dataset(data_path)?;
    let split = align_channels(data.split, &ckpt)?;
    Ok((ckpt, split))
}

fn id_range(split: &DatasetSplit) -> String {
    let ids = split.all().map(|s| s.id);
    let (lo, hi) = ids.fold((u64::MAX, 0), |(lo, hi), id| (lo.min(id), hi.max(id)));
    format!("{lo}..={hi}")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { task: Task::SyntheticMnist, mnist, out, seed, n_total } => {
            if !mnist.is_dir() {
                return Err(Error::Usage(format!("--mnist {}: not a directory", mnist.display())));
            }
            let pool = load_mnist(&mnist)?;
            let (split, _) = generate_synthetic_mnist(&pool, n_total, (0.72, 0.18, 0.10), seed)?;
            let manifest = save_dataset(&out, &split, None)?;
            println!(
                "wrote {} ({} train, {} validation, {} test; channels {:?})",
                manifest.display(),
                split.train.len(),
                split.validation.len(),
                split.test.len(),
                SYNTHETIC_CHANNELS
            );
        }
        Command::Train { config, resume } => {
            let cfg = config::load(&config)?;
            let pool = pool(cli.threads.or(cfg.threads))?;
            log::info!("{}: {} on {} threads", cfg.name, cfg.model_kind.as_str(), pool.threads());
            let out = run_experiment(&cfg, resume.as_deref(), &pool)?;
            let s = &out.summary;
            println!("test accuracy {:.4}", s.test.accuracy);
            if let Some(pm) = s.test.plus_minus_one {
                println!("test accuracy +/-1 {pm:.4}");
            }
            println!("best cycle {} (validation accuracy {:.4})", s.best_cycle, s.best_val_accuracy);
            println!("wrote {}", out.dir.display());
        }
        Command::Evaluate { ckpt, data, split, plus_minus_one, out, logits_out } => {
            let (checkpoint, data) = load_pair(&ckpt, &data)?;
            let adjacency = plus_minus_one.as_deref().map(parse_adjacency).transpose()?;
            let pool = pool(cli.threads)?;
            let kind = SplitKind::from(split);
            let metrics = evaluate_checkpoint(&checkpoint.model, &data, kind, adjacency, &pool)?;
            let text = serde_json::to_string_pretty(&metrics).expect("metrics serialise") + "\n";
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?,
                None => print!("{text}"),
            }
            if let Some(path) = logits_out {
                let samples: Vec<_> = data.samples(kind).iter().collect();
                let logits = batched_logits(&checkpoint.model, &samples, &pool)?;
                let tensor = Tensor::new(vec![samples.len(), checkpoint.model.classes()], TensorData::F32(logits))?;
                save_tensor(&path, &tensor)?;
            }
        }
        Command::Explain { ckpt, data, sample, top_k, out } => {
            let (checkpoint, data) = load_pair(&ckpt, &data)?;
            let net = prototype_net(&checkpoint)?;
            let fields = receptive_fields(&net.encoder.config, net.input.height, net.input.width)?;
            let mut explanations = Vec::new();
            for id in sample {
                let s = data
                    .find(id)
                    .ok_or_else(|| Error::Usage(format!("unknown sample id {id}; valid ids are {}", id_range(&data))))?;
                explanations.push(local_explanation_with_fields(net, s, top_k, &fields)?);
            }
            for e in &explanations {
                let top = e.entries.first();
                println!(
                    "sample {} label {} predicted {} (p = {:.3}); top prototype {}",
                    e.sample_id,
                    e.label,
                    e.predicted,
                    e.probability,
                    top.map_or("-".into(), |t| format!("{} channel {:?} score {:.4}", t.prototype, t.channel, t.score))
                );
                if e.unprojected {
                    log::warn!("sample {}: prototypes are not projected", e.sample_id);
                }
            }
            let files = render_local_reports(net, &data, &explanations, &meta(&ckpt, &checkpoint), &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::GlobalReport { ckpt, data, out, split, class_group, near_zero } => {
            let loaded = load_dataset(&data)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let classes = class_group
                .map(|names| {
                    names
                        .iter()
                        .map(|n| {
                            loaded.class_index(n.trim()).ok_or_else(|| Error::Usage(format!("unknown class {n:?}")))
                        })
                        .collect::<Result<Vec<usize>>>()
                })
                .transpose()?;
            let data = align_channels(loaded.split, &checkpoint)?;
            let net = prototype_net(&checkpoint)?;
            let samples: Vec<_> = data.samples(SplitKind::from(split)).iter().collect();
            let global = global_explanation(net, &samples, classes.as_deref(), near_zero)?;
            for g in &global.weights.groups {
                let name = g.channel.and_then(|c| checkpoint.channel_names.get(c)).map_or("joint", String::as_str);
                println!(
                    "group {} ({name}): mean |w| {:.5}, near-zero fraction {:.3}, top-score count {}",
                    g.group, g.overall.mean_abs, g.overall.near_zero_fraction, global.frequency.groups[g.group]
                );
            }
            let files = render_global_report(net, &global, &meta(&ckpt, &checkpoint), &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
