//! Training schedule: alternating prototype-layer and head epochs with
//! periodic projection, plus the single-stage baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, RasterSample, SplitKind};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::head::{HeadWeights, LossConfig};
use crate::metrics::{evaluate, predictions, Adjacency, Metrics};
use crate::model::{head_loss, InputShape, LossParts, Model, ModelKind, ProtoNet, StageOneGrads, StandardNet};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::Executor;
use crate::prototype::{project_prototypes, CandidatePatches, PrototypeBank};
use crate::{Error, Real, Result};

/// Samples per unit of parallel work. Fixed so that gradient sums do not
/// depend on the number of threads.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    #[default]
    None,
    /// Pre-trained encoder kept fixed.
    Frozen,
    /// Pre-trained encoder used as the starting point.
    Unfrozen,
}

fn default_epsilon() -> f64 {
    1e-4
}
fn default_head_init() -> f64 {
    0.01
}
fn default_patience() -> usize {
    8
}
fn default_clip() -> Option<f64> {
    Some(5.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub encoder: EncoderConfig,
    pub prototypes_per_class: usize,
    pub location_scaling: bool,
    pub loss: LossConfig,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cycles between projections.
    pub projection_period: usize,
    pub max_cycles: usize,
    /// Cycles without a better validation accuracy before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub extra_stage3_epochs: usize,
    pub seed: u64,
    #[serde(default = "default_head_init")]
    pub head_init_range: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub transfer: TransferMode,
    /// Checkpoint holding the pre-trained encoder; ignored when `transfer`
    /// is `None`.
    #[serde(default)]
    pub pretrained: Option<String>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.projection_period == 0 {
            return bad("projection period must be at least one cycle");
        }
        if self.batch_size == 0 || self.max_cycles == 0 {
            return bad("batch size and max cycles must be positive");
        }
        if self.prototypes_per_class == 0 && self.model_kind != ModelKind::StandardNn {
            return bad("prototypes per class must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { clip_norm: self.clip_norm, ..AdamConfig::new(self.learning_rate) }
    }
}

/// Mixes a seed with a list of tags into an independent 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

const TAG_ENCODER: u64 = 1;
const TAG_BANK: u64 = 2;
const TAG_HEAD: u64 = 3;
const TAG_ORDER1: u64 = 4;
const TAG_ORDER3: u64 = 5;
const TAG_DROPOUT: u64 = 6;

/// Fresh model for the configured kind.
pub fn build_model<T: Real>(cfg: &TrainConfig, input: InputShape, classes: usize) -> Result<Model<T>> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut enc_cfg = cfg.encoder.clone();
    match cfg.model_kind {
        ModelKind::ProtoJoint => enc_cfg.in_channels = input.channels,
        _ => enc_cfg.in_channels = 1,
    }
    let encoder = Encoder::new(enc_cfg, input.height, input.width, derive_seed(seed, &[TAG_ENCODER]))?;
    if cfg.model_kind == ModelKind::StandardNn {
        let features = input.channels * encoder.embedding_len();
        let bound = 1.0 / libm::sqrt(features as f64);
        let weights = HeadWeights::uniform(features, classes, bound, derive_seed(seed, &[TAG_HEAD]));
        let bias = HeadWeights::<T>::uniform(1, classes, bound, derive_seed(seed, &[TAG_HEAD, 1])).weights;
        return Ok(Model::Standard(StandardNet { input, encoder, weights, bias }));
    }
    let groups = if cfg.model_kind.per_channel() { input.channels } else { 1 };
    let bank = PrototypeBank::init(
        groups,
        classes,
        cfg.prototypes_per_class,
        encoder.embedding_shape(),
        cfg.location_scaling,
        derive_seed(seed, &[TAG_BANK]),
    )?;
    let head = HeadWeights::uniform(bank.total(), classes, cfg.head_init_range, derive_seed(seed, &[TAG_HEAD]));
    Ok(Model::Prototype(ProtoNet {
        kind: cfg.model_kind,
        input,
        encoder,
        bank,
        head,
        epsilon: T::from_f64_lossy(cfg.epsilon),
    }))
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// Cycle index starting at 1; the extra head epochs after the last
    /// projection use `max cycle + epoch`.
    pub cycle: usize,
    pub phase: Phase,
    pub stage1: Option<LossParts>,
    pub stage3_loss: Option<f64>,
    pub projected: bool,
    pub val_accuracy: f64,
    /// Whether this state may be retained as the final model.
    pub candidate: bool,
    pub best: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cycle,
    Final,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub history: Vec<CycleRecord>,
    pub best_cycle: usize,
    pub best_val_accuracy: f64,
}

fn order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Logits for a whole split, computed in fixed-size chunks.
pub fn batched_logits<T: Real, E: Executor>(model: &Model<T>, samples: &[&RasterSample], exec: &E) -> Result<Vec<T>> {
    let chunks = samples.len().div_ceil(CHUNK * 4);
    let parts = exec.map(chunks, |c| {
        let end = ((c + 1) * CHUNK * 4).min(samples.len());
        model.logits(&samples[c * CHUNK * 4..end])
    });
    let mut out = Vec::with_capacity(samples.len() * model.classes());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate_model<T: Real, E: Executor>(
    model: &Model<T>,
    samples: &[&RasterSample],
    adjacency: Option<Adjacency>,
    exec: &E,
) -> Result<Metrics> {
    let logits = batched_logits(model, samples, exec)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    evaluate(&predictions(&logits, model.classes()), &labels, model.classes(), adjacency)
}

/// Owns a model under training and its optimiser state.
pub struct Trainer<'a, T: Real, E: Executor> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    pub train_encoder: bool,
    exec: &'a E,
    train: Vec<&'a RasterSample>,
    val: Vec<&'a RasterSample>,
    stage1: Option<Adam<T>>,
    stage3: Option<Adam<T>>,
    /// Max similarities of the training split under the current
    /// prototype layer, `train x A`.
    cache: Option<Vec<T>>,
}

impl<'a, T: Real, E: Executor> Trainer<'a, T, E> {
    pub fn new(cfg: TrainConfig, data: &'a DatasetSplit, exec: &'a E) -> Result<Self> {
        data.validate()?;
        let model = build_model(&cfg, InputShape::of(&data.train[0]), data.num_classes)?;
        Self::with_model(cfg, model, data, exec)
    }

    /// Continues from an existing model (fresh optimiser state).
    pub fn with_model(cfg: TrainConfig, model: Model<T>, data: &'a DatasetSplit, exec: &'a E) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        if model.kind() != cfg.model_kind {
            return Err(Error::Architecture(format!(
                "model is {}, configuration asks for {}",
                model.kind().as_str(),
                cfg.model_kind.as_str()
            )));
        }
        if model.input() != InputShape::of(&data.train[0]) || model.classes() != data.num_classes {
            return Err(Error::Architecture("model input shape or class count does not match the dataset".into()));
        }
        let train_encoder = cfg.transfer != TransferMode::Frozen;
        Ok(Self {
            cfg,
            model,
            train_encoder,
            exec,
            train: data.samples(SplitKind::Train).iter().collect(),
            val: data.samples(SplitKind::Validation).iter().collect(),
            stage1: None,
            stage3: None,
            cache: None,
        })
    }

    /// Pre-trained encoder substitution.
    pub fn with_pretrained_encoder(
        cfg: TrainConfig,
        pretrained: &EncoderParams<T>,
        pretrained_config: &EncoderConfig,
        data: &'a DatasetSplit,
        exec: &'a E,
    ) -> Result<Self> {
        let mut trainer = Self::new(cfg, data, exec)?;
        if trainer.cfg.transfer == TransferMode::None {
            return Ok(trainer);
        }
        let Model::Prototype(net) = &mut trainer.model else {
            return Err(Error::Architecture("transfer needs a prototype model".into()));
        };
        let mine = &net.encoder.config;
        if mine.stages != pretrained_config.stages
            || mine.in_channels != pretrained_config.in_channels
            || (mine.embedding_h, mine.embedding_w) != (pretrained_config.embedding_h, pretrained_config.embedding_w)
        {
            return Err(Error::Architecture("pre-trained encoder configuration differs".into()));
        }
        let (h, w) = (net.input.height, net.input.width);
        net.encoder = Encoder::with_params(mine.clone(), h, w, pretrained.clone())?;
        Ok(trainer)
    }

    fn chunk_ranges(&self, batch: &[usize]) -> Vec<(usize, usize)> {
        (0..batch.len().div_ceil(CHUNK)).map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(batch.len()))).collect()
    }

    fn diverged(cycle: usize, e: Error) -> Error {
        match e {
            Error::Numeric { stage } => Error::Divergence { cycle, detail: stage },
            other => other,
        }
    }

    /// One epoch of the prototype-layer stage (head frozen), or one full
    /// epoch for the baseline. Returns mean batch losses.
    pub fn stage_one_epoch(&mut self, cycle: usize) -> Result<LossParts> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_ORDER1, cycle as u64]));
        let idx = order(self.train.len(), &mut rng);
        let batches: Vec<&[usize]> = idx.chunks(self.cfg.batch_size).collect();
        let mut sum = LossParts::default();
        for (b, batch) in batches.iter().enumerate() {
            let parts = self.stage_one_batch(cycle, b, batch)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence { cycle, detail: format!("stage-1 loss {} in batch {b}", parts.total) });
            }
            sum.add(&parts);
        }
        self.cache = None;
        let n = batches.len().max(1) as f64;
        Ok(LossParts {
            total: sum.total / n,
            cross_entropy: sum.cross_entropy / n,
            cluster: sum.cluster / n,
            separation: sum.separation / n,
            diversity: sum.diversity / n,
        })
    }

    fn stage_one_batch(&mut self, cycle: usize, b: usize, batch: &[usize]) -> Result<LossParts> {
        let samples: Vec<&RasterSample> = batch.iter().map(|&i| self.train[i]).collect();
        let ranges = self.chunk_ranges(batch);
        let scale = T::one() / T::from_usize(batch.len()).expect("count fits");
        let seed = self.cfg.seed;
        let dropout_seed = |c: usize| derive_seed(seed, &[TAG_DROPOUT, cycle as u64, b as u64, c as u64]);
        let train_encoder = self.train_encoder;
        let adam_cfg = self.cfg.adam();
        match &mut self.model {
            Model::Prototype(net) => {
                let loss = self.cfg.loss;
                let net_ref = &*net;
                let results = self.exec.map(ranges.len(), |c| {
                    let (s, e) = ranges[c];
                    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(c));
                    let dropout = (train_encoder && net_ref.encoder.config.dropout > 0.0).then_some(&mut rng);
                    net_ref.stage_one_chunk(&samples[s..e], &loss, scale, dropout, train_encoder)
                });
                let mut parts = LossParts::default();
                let mut grads: Option<StageOneGrads<T>> = None;
                for r in results {
                    let (p, g) = r.map_err(|e| Self::diverged(cycle, e))?;
                    parts.add(&p);
                    match &mut grads {
                        Some(acc) => acc.add_assign(&g),
                        None => grads = Some(g),
                    }
                }
                let mut grads = grads.expect("batch is nonempty");
                let div = net.diversity_term(&loss, &mut grads);
                parts.diversity = div;
                parts.total += loss.diversity * div;
                let g = grads.slices();
                let opt = self.stage1.get_or_insert_with(|| {
                    Adam::new(adam_cfg, &g.iter().map(|s| s.len()).collect::<Vec<_>>())
                });
                opt.update(&mut net.stage_one_params_mut(train_encoder), &g);
                Ok(parts)
            }
            Model::Standard(net) => {
                let net_ref = &*net;
                let results = self.exec.map(ranges.len(), |c| {
                    let (s, e) = ranges[c];
                    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(c));
                    let dropout = (net_ref.encoder.config.dropout > 0.0).then_some(&mut rng);
                    net_ref.loss_chunk(&samples[s..e], scale, dropout)
                });
                let mut parts = LossParts::default();
                let mut grads = None;
                for r in results {
                    let (p, g) = r.map_err(|e| Self::diverged(cycle, e))?;
                    parts.add(&p);
                    match &mut grads {
                        Some(acc) => crate::model::StandardGrads::add_assign(acc, &g),
                        None => grads = Some(g),
                    }
                }
                let grads = grads.expect("batch is nonempty");
                let g = grads.slices();
                let opt = self.stage1.get_or_insert_with(|| {
                    Adam::new(adam_cfg, &g.iter().map(|s| s.len()).collect::<Vec<_>>())
                });
                opt.update(&mut net.params_mut(), &g);
                Ok(parts)
            }
        }
    }

    /// Dropout-free embeddings of the training split.
    fn train_embeddings(&self, net: &ProtoNet<T>) -> Result<Vec<T>> {
        let n = self.train.len();
        let chunks = n.div_ceil(CHUNK * 4);
        let parts = self.exec.map(chunks, |c| {
            let end = ((c + 1) * CHUNK * 4).min(n);
            net.embed(&self.train[c * CHUNK * 4..end])
        });
        let mut out = Vec::with_capacity(n * net.groups() * net.encoder.embedding_len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Recomputes the max-similarity cache, projecting prototypes first when
    /// asked. Returns the pre-projection distances on projection.
    pub fn refresh(&mut self, project: bool, cycle: usize) -> Result<Option<Vec<T>>> {
        let Model::Prototype(net) = &self.model else {
            return Ok(None);
        };
        let z = self.train_embeddings(net).map_err(|e| Self::diverged(cycle, e))?;
        let mut moved = None;
        if project {
            let ids: Vec<u64> = self.train.iter().map(|s| s.id).collect();
            let labels: Vec<usize> = self.train.iter().map(|s| s.label).collect();
            let (bank, dist) =
                project_prototypes(&net.bank, &CandidatePatches { ids: &ids, labels: &labels, values: &z })?;
            let Model::Prototype(net) = &mut self.model else { unreachable!() };
            net.bank = bank;
            moved = Some(dist);
        }
        let Model::Prototype(net) = &self.model else { unreachable!() };
        let n = self.train.len();
        let per = net.groups() * net.encoder.embedding_len();
        let chunks = n.div_ceil(CHUNK * 4);
        let parts = self.exec.map(chunks, |c| {
            let (s, e) = (c * CHUNK * 4, ((c + 1) * CHUNK * 4).min(n));
            net.bank.forward_batch(&z[s * per..e * per], e - s, net.epsilon).map(|f| f.max)
        });
        let mut m = Vec::with_capacity(n * net.bank.total());
        for p in parts {
            m.extend(p.map_err(|e| Self::diverged(cycle, e))?);
        }
        self.cache = Some(m);
        Ok(moved)
    }

    /// One epoch of head training on cached max similarities.
    pub fn stage_three_epoch(&mut self, epoch_tag: usize) -> Result<f64> {
        if self.cache.is_none() {
            self.refresh(false, epoch_tag)?;
        }
        let Model::Prototype(net) = &mut self.model else {
            return Err(Error::Architecture("the baseline has no separate head stage".into()));
        };
        let m = self.cache.as_ref().expect("cache refreshed");
        let a = net.bank.total();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_ORDER3, epoch_tag as u64]));
        let idx = order(self.train.len(), &mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        let adam_cfg = self.cfg.adam();
        for batch in idx.chunks(self.cfg.batch_size) {
            let mut mb = Vec::with_capacity(batch.len() * a);
            for &i in batch {
                mb.extend_from_slice(&m[i * a..(i + 1) * a]);
            }
            let labels: Vec<usize> = batch.iter().map(|&i| self.train[i].label).collect();
            let (loss, grad) = head_loss(&net.head, &mb, &labels, self.cfg.loss.l1);
            if !loss.is_finite() {
                return Err(Error::Divergence { cycle: epoch_tag, detail: format!("stage-3 loss {loss}") });
            }
            let opt = self.stage3.get_or_insert_with(|| Adam::new(adam_cfg, &[grad.len()]));
            opt.update(&mut [net.head.weights.as_mut_slice()], &[&grad]);
            total += loss;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }

    pub fn validation_accuracy(&self) -> Result<f64> {
        Ok(evaluate_model(&self.model, &self.val, None, self.exec)?.accuracy)
    }

    /// Runs the full schedule, reporting every history line to `observe`.
    pub fn run(mut self, observe: &mut dyn FnMut(&CycleRecord)) -> Result<TrainOutcome<T>> {
        let mut history = Vec::new();
        let mut best: Option<(f64, usize, Model<T>)> = None;
        let mut record = |rec: CycleRecord, history: &mut Vec<CycleRecord>| {
            observe(&rec);
            history.push(rec);
        };
        let consider = |acc: f64, cycle: usize, model: &Model<T>, best: &mut Option<(f64, usize, Model<T>)>| {
            let better = best.as_ref().is_none_or(|(b, _, _)| acc > *b);
            if better {
                *best = Some((acc, cycle, model.clone()));
            }
            better
        };
        let proto = matches!(self.model, Model::Prototype(_));
        let mut last_cycle = 0;
        let mut last_projected = false;
        for cycle in 1..=self.cfg.max_cycles {
            last_cycle = cycle;
            let stage1 = self.stage_one_epoch(cycle)?;
            let (projected, stage3) = if proto {
                let projected = cycle % self.cfg.projection_period == 0;
                self.refresh(projected, cycle)?;
                (projected, Some(self.stage_three_epoch(cycle)?))
            } else {
                (false, None)
            };
            last_projected = projected;
            let val = self.validation_accuracy()?;
            let candidate = !proto || projected;
            let is_best = candidate && consider(val, cycle, &self.model, &mut best);
            record(
                CycleRecord {
                    cycle,
                    phase: Phase::Cycle,
                    stage1: Some(stage1),
                    stage3_loss: stage3,
                    projected,
                    val_accuracy: val,
                    candidate,
                    best: is_best,
                },
                &mut history,
            );
            let since = best.as_ref().map_or(cycle, |(_, c, _)| cycle - c);
            if since >= self.cfg.patience {
                log::info!("early stop after cycle {cycle}");
                break;
            }
        }
        if proto {
            // Guarantee the retained model has projected prototypes.
            if !last_projected {
                self.refresh(true, last_cycle)?;
            }
            let epochs = self.cfg.extra_stage3_epochs;
            for e in 1..=epochs {
                let tag = last_cycle + e;
                let loss = self.stage_three_epoch(tag)?;
                let val = self.validation_accuracy()?;
                let last = e == epochs;
                let is_best = last && consider(val, tag, &self.model, &mut best);
                record(
                    CycleRecord {
                        cycle: tag,
                        phase: Phase::Final,
                        stage1: None,
                        stage3_loss: Some(loss),
                        projected: e == 1 && !last_projected,
                        val_accuracy: val,
                        candidate: last,
                        best: is_best,
                    },
                    &mut history,
                );
            }
            if epochs == 0 && !last_projected {
                let val = self.validation_accuracy()?;
                let is_best = consider(val, last_cycle, &self.model, &mut best);
                record(
                    CycleRecord {
                        cycle: last_cycle,
                        phase: Phase::Final,
                        stage1: None,
                        stage3_loss: None,
                        projected: true,
                        val_accuracy: val,
                        candidate: true,
                        best: is_best,
                    },
                    &mut history,
                );
            }
        }
        let (best_val_accuracy, best_cycle, model) = best.expect("at least one candidate state");
        Ok(TrainOutcome { model, history, best_cycle, best_val_accuracy })
    }
}

/// Trains a fresh model for `cfg` on `data`.
pub fn train<T: Real, E: Executor>(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    exec: &E,
    observe: &mut dyn FnMut(&CycleRecord),
) -> Result<TrainOutcome<T>> {
    Trainer::new(cfg.clone(), data, exec)?.run(observe)
}

/// Trains a prototype model starting from (or fixed to) a pre-trained
/// encoder.
pub fn train_transfer<T: Real, E: Executor>(
    cfg: &TrainConfig,
    pretrained: &Encoder<T>,
    data: &DatasetSplit,
    exec: &E,
    observe: &mut dyn FnMut(&CycleRecord),
) -> Result<TrainOutcome<T>> {
    Trainer::with_pretrained_encoder(cfg.clone(), &pretrained.params, &pretrained.config, data, exec)?.run(observe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_pool;
    use crate::data::generate_synthetic_mnist;
    use crate::encoder::StageConfig;
    use crate::parallel::Sequential;

    pub(crate) fn tiny_config(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            model_kind: kind,
            encoder: EncoderConfig {
                in_channels: 1,
                stages: vec![StageConfig::standard(2), StageConfig::standard(3)],
                negative_slope: 0.01,
                embedding_h: 2,
                embedding_w: 2,
                dropout: 0.2,
            },
            prototypes_per_class: 2,
            location_scaling: true,
            loss: LossConfig { cluster: 0.7, separation: 0.7, diversity: 0.001, diversity_threshold: 0.001, l1: 0.01 },
            epsilon: 1e-4,
            batch_size: 16,
            learning_rate: 0.001,
            projection_period: 2,
            max_cycles: 3,
            patience: 8,
            extra_stage3_epochs: 1,
            seed: 5,
            head_init_range: 0.01,
            clip_norm: Some(5.0),
            transfer: TransferMode::None,
            pretrained: None,
        }
    }

    fn tiny_data() -> DatasetSplit {
        let pool = toy_pool(3);
        generate_synthetic_mnist(&pool, 200, (0.6, 0.2, 0.2), 3).unwrap().0
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(ModelKind::ProtoChannel);
        assert!(cfg.validate().is_ok());
        cfg.projection_period = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[1]), derive_seed(1, &[2]));
        assert_ne!(derive_seed(1, &[1, 2]), derive_seed(1, &[2, 1]));
        assert_eq!(derive_seed(9, &[3]), derive_seed(9, &[3]));
    }

    #[test]
    fn stage_isolation_and_projection_contract() {
        let data = tiny_data();
        let cfg = tiny_config(ModelKind::ProtoChannel);
        let mut t = Trainer::<f32, _>::new(cfg, &data, &Sequential).unwrap();
        let head_before = t.model.as_prototype().unwrap().head.clone();
        t.stage_one_epoch(1).unwrap();
        let net = t.model.as_prototype().unwrap().clone();
        assert_eq!(net.head, head_before);
        t.refresh(true, 1).unwrap();
        let projected = t.model.as_prototype().unwrap().clone();
        assert_eq!(projected.head, net.head);
        assert_eq!(projected.bank.scaling, net.bank.scaling);
        assert_eq!(projected.encoder, net.encoder);
        assert!(projected.bank.is_projected());
        t.stage_three_epoch(1).unwrap();
        let after = t.model.as_prototype().unwrap();
        assert_eq!(after.encoder, projected.encoder);
        assert_eq!(after.bank, projected.bank);
        assert_ne!(after.head, projected.head);
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let data = tiny_data();
        let mut cfg = tiny_config(ModelKind::ProtoChannel);
        cfg.transfer = TransferMode::Frozen;
        let pre: Encoder<f32> = Encoder::new(cfg.encoder.clone(), 56, 56, 77).unwrap();
        let out = train_transfer(&cfg, &pre, &data, &Sequential, &mut |_| {}).unwrap();
        assert_eq!(out.model.encoder().params, pre.params);
        let mut mismatch = cfg.clone();
        mismatch.encoder.stages[1].out_channels = 4;
        assert!(matches!(
            train_transfer(&mismatch, &pre, &data, &Sequential, &mut |_| {}),
            Err(Error::Architecture(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_selects_projected_states() {
        let data = tiny_data();
        let cfg = tiny_config(ModelKind::ProtoChannel);
        let a = train::<f32, _>(&cfg, &data, &Sequential, &mut |_| {}).unwrap();
        let b = train::<f32, _>(&cfg, &data, &Sequential, &mut |_| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert!(a.model.as_prototype().unwrap().bank.is_projected());
        let best: Vec<_> = a.history.iter().filter(|r| r.best).collect();
        assert!(best.iter().all(|r| r.candidate));
        assert_eq!(a.history.iter().filter(|r| r.projected).count(), 2);
    }

    #[test]
    fn baseline_and_joint_run() {
        let data = tiny_data();
        let std_out = train::<f32, _>(&tiny_config(ModelKind::StandardNn), &data, &Sequential, &mut |_| {}).unwrap();
        assert!(std_out.history.iter().all(|r| r.stage3_loss.is_none() && !r.projected));
        let joint = train::<f32, _>(&tiny_config(ModelKind::ProtoJoint), &data, &Sequential, &mut |_| {}).unwrap();
        let net = joint.model.as_prototype().unwrap();
        assert_eq!(net.groups(), 1);
        assert_eq!(net.encoder.config.in_channels, 3);
        assert_eq!(net.bank.total(), 2 * 10);
    }
}
