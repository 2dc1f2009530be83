//! Model variants and their forward / backward passes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RasterSample;
use crate::encoder::{Encoder, EncoderParams};
use crate::head::{
    cluster_nearest, cross_entropy, diversity_grad, diversity_per_group, l1_penalty, separation_nearest,
    HeadWeights, LossConfig,
};
use crate::prototype::{BatchSimilarity, PrototypeBank};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Shared per-channel encoder followed by a biased linear classifier.
    StandardNn,
    /// One encoder over all channels at once and a single prototype bank.
    ProtoJoint,
    /// Shared per-channel encoder with one prototype bank per channel.
    ProtoChannel,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::StandardNn => "standard_nn",
            ModelKind::ProtoJoint => "proto_joint",
            ModelKind::ProtoChannel => "proto_channel",
        }
    }

    /// Whether every raster channel goes through the encoder on its own.
    pub fn per_channel(self) -> bool {
        !matches!(self, ModelKind::ProtoJoint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn of(sample: &RasterSample) -> Self {
        Self { height: sample.height, width: sample.width, channels: sample.channels }
    }
}

fn check_samples(shape: InputShape, samples: &[&RasterSample]) -> Result<()> {
    for s in samples {
        if InputShape::of(s) != shape {
            return Err(Error::Shape(format!(
                "sample {} is {}x{}x{}, model expects {}x{}x{}",
                s.id, s.height, s.width, s.channels, shape.height, shape.width, shape.channels
            )));
        }
    }
    Ok(())
}

/// Encoder input for a batch: one single-channel image per (sample,
/// channel), sample-major, or the raw multi-channel grids for a joint
/// encoder.
pub fn encoder_input<T: Real>(samples: &[&RasterSample], per_channel: bool) -> Vec<T> {
    let total: usize = samples.iter().map(|s| s.pixels.len()).sum();
    let mut out = Vec::with_capacity(total);
    for s in samples {
        if per_channel {
            for j in 0..s.channels {
                out.extend(s.pixels.iter().skip(j).step_by(s.channels).map(|&v| T::from_f64_lossy(v as f64)));
            }
        } else {
            out.extend(s.pixels.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
    }
    out
}

/// Prototype network (channel-specific or joint).
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoNet<T> {
    pub kind: ModelKind,
    pub input: InputShape,
    pub encoder: Encoder<T>,
    pub bank: PrototypeBank<T>,
    pub head: HeadWeights<T>,
    pub epsilon: T,
}

/// Output of an inference pass.
#[derive(Debug, Clone)]
pub struct ProtoForward<T> {
    /// `samples x groups x cells x d`
    pub embeddings: Vec<T>,
    pub similarity: BatchSimilarity<T>,
    /// `samples x classes`
    pub logits: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    pub cluster: f64,
    pub separation: f64,
    pub diversity: f64,
}

impl LossParts {
    pub fn add(&mut self, other: &LossParts) {
        self.total += other.total;
        self.cross_entropy += other.cross_entropy;
        self.cluster += other.cluster;
        self.separation += other.separation;
        self.diversity += other.diversity;
    }
}

/// Gradients of the first-stage loss.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneGrads<T> {
    pub encoder: Option<EncoderParams<T>>,
    pub vectors: Vec<T>,
    pub scaling: Option<Vec<T>>,
}

impl<T: Real> StageOneGrads<T> {
    /// Same order as [`ProtoNet::stage_one_params_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            out.extend(e.slices());
        }
        out.push(self.vectors.as_slice());
        if let Some(s) = &self.scaling {
            out.push(s.as_slice());
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        if let (Some(a), Some(b)) = (&mut self.encoder, &other.encoder) {
            a.add_assign(b);
        }
        add_into(&mut self.vectors, &other.vectors);
        if let (Some(a), Some(b)) = (&mut self.scaling, &other.scaling) {
            add_into(a, b);
        }
    }
}

pub(crate) fn add_into<T: Real>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + y;
    }
}

impl<T: Real> ProtoNet<T> {
    pub fn groups(&self) -> usize {
        self.bank.groups
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    /// Raster channel a prototype group looks at; `None` for a joint bank.
    pub fn group_channel(&self, group: usize) -> Option<usize> {
        self.kind.per_channel().then_some(group)
    }

    fn images_per_sample(&self) -> usize {
        if self.kind.per_channel() {
            self.input.channels
        } else {
            1
        }
    }

    /// Dropout-free embeddings, `samples x groups x cells x d`.
    pub fn embed(&self, samples: &[&RasterSample]) -> Result<Vec<T>> {
        check_samples(self.input, samples)?;
        let x = encoder_input(samples, self.kind.per_channel());
        self.encoder.encode_batch(&x, samples.len() * self.images_per_sample())
    }

    pub fn forward_embeddings(&self, embeddings: Vec<T>, n: usize) -> Result<ProtoForward<T>> {
        let similarity = self.bank.forward_batch(&embeddings, n, self.epsilon)?;
        let logits = self.head.logits_batch(&similarity.max, n)?;
        Ok(ProtoForward { embeddings, similarity, logits })
    }

    pub fn forward(&self, samples: &[&RasterSample]) -> Result<ProtoForward<T>> {
        let z = self.embed(samples)?;
        self.forward_embeddings(z, samples.len())
    }

    pub fn logits(&self, samples: &[&RasterSample]) -> Result<Vec<T>> {
        Ok(self.forward(samples)?.logits)
    }

    /// First-stage loss over `samples` with every sample-level term summed
    /// and multiplied by `scale`. The parameter-only diversity term is not
    /// included; see [`ProtoNet::diversity_term`].
    pub fn stage_one_chunk(
        &self,
        samples: &[&RasterSample],
        cfg: &LossConfig,
        scale: T,
        dropout: Option<&mut ChaCha8Rng>,
        train_encoder: bool,
    ) -> Result<(LossParts, StageOneGrads<T>)> {
        check_samples(self.input, samples)?;
        let n = samples.len();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let x = encoder_input(samples, self.kind.per_channel());
        let images = n * self.images_per_sample();
        let (z, act) = if train_encoder {
            let (z, act) = self.encoder.forward_train(&x, images, dropout)?;
            (z, Some(act))
        } else {
            (self.encoder.encode_batch(&x, images)?, None)
        };
        let fwd = self.bank.forward_batch(&z, n, self.epsilon)?;
        let logits = self.head.logits_batch(&fwd.max, n)?;
        let (ce, g_logits) = cross_entropy(&logits, &labels, self.classes(), scale);

        // d(logits)/d(max) = W^T; the head itself stays frozen here.
        let (a, k) = (self.head.inputs, self.head.classes);
        let mut g_max = vec![T::zero(); n * a];
        crate::real::matmul(n, k, a, &g_logits, false, &self.head.weights, true, &mut g_max, false);

        let mut g_dist = vec![T::zero(); fwd.distances.len()];
        let lam_c = T::from_f64_lossy(cfg.cluster) * scale;
        let lam_s = T::from_f64_lossy(cfg.separation) * scale;
        let mut cluster = T::zero();
        for nearest in cluster_nearest(&self.bank, &fwd, &labels) {
            cluster = cluster + nearest.distance;
            g_dist[nearest.index] = g_dist[nearest.index] + lam_c;
        }
        let mut separation = T::zero();
        for nearest in separation_nearest(&self.bank, &fwd, &labels).into_iter().flatten() {
            separation = separation - nearest.distance;
            g_dist[nearest.index] = g_dist[nearest.index] - lam_s;
        }
        let sg = self.bank.backward_batch(&z, &fwd, Some(&g_max), Some(&g_dist), self.epsilon);
        let encoder = act.map(|act| self.encoder.backward(&act, &sg.embeddings, false).0);
        let (cluster, separation) = (cluster * scale, separation * scale);
        let total = ce + T::from_f64_lossy(cfg.cluster) * cluster + T::from_f64_lossy(cfg.separation) * separation;
        let parts = LossParts {
            total: total.to_f64_lossy(),
            cross_entropy: ce.to_f64_lossy(),
            cluster: cluster.to_f64_lossy(),
            separation: separation.to_f64_lossy(),
            diversity: 0.0,
        };
        Ok((parts, StageOneGrads { encoder, vectors: sg.vectors, scaling: sg.scaling }))
    }

    /// Weighted diversity term (summed over groups) and its gradient, added
    /// into `grads`.
    pub fn diversity_term(&self, cfg: &LossConfig, grads: &mut StageOneGrads<T>) -> f64 {
        if cfg.diversity == 0.0 {
            return 0.0;
        }
        let tau = T::from_f64_lossy(cfg.diversity_threshold);
        let coeff = T::from_f64_lossy(cfg.diversity);
        diversity_grad(&self.bank, tau, coeff, &mut grads.vectors);
        let value: T = diversity_per_group(&self.bank, tau).into_iter().sum();
        value.to_f64_lossy()
    }

    /// Mean cross-entropy plus the weighted prototype terms, each summed
    /// over prototype groups, with gradients.
    pub fn stage_one_loss(
        &self,
        samples: &[&RasterSample],
        cfg: &LossConfig,
        dropout: Option<&mut ChaCha8Rng>,
        train_encoder: bool,
    ) -> Result<(LossParts, StageOneGrads<T>)> {
        let scale = T::one() / T::from_usize(samples.len().max(1)).expect("count fits");
        let (mut parts, mut grads) = self.stage_one_chunk(samples, cfg, scale, dropout, train_encoder)?;
        let div = self.diversity_term(cfg, &mut grads);
        parts.diversity = div;
        parts.total += cfg.diversity * div;
        Ok((parts, grads))
    }

    /// Mean cross-entropy plus `l1 * sum |W|`, with the gradient for the head
    /// only.
    pub fn stage_three_loss(&self, samples: &[&RasterSample], l1: f64) -> Result<(f64, Vec<T>)> {
        let fwd = self.forward(samples)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Ok(head_loss(&self.head, &fwd.similarity.max, &labels, l1))
    }

    /// Trainable tensors of the first stage: encoder (when trained),
    /// prototype vectors, then scaling grids (when enabled).
    pub fn stage_one_params_mut(&mut self, train_encoder: bool) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        if train_encoder {
            out.extend(self.encoder.params.slices_mut());
        }
        out.push(self.bank.vectors.as_mut_slice());
        if let Some(s) = self.bank.scaling.as_mut() {
            out.push(s.as_mut_slice());
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ProtoNet<U> {
        ProtoNet {
            kind: self.kind,
            input: self.input,
            encoder: self.encoder.cast(),
            bank: self.bank.cast(),
            head: self.head.cast(),
            epsilon: U::from_f64_lossy(self.epsilon.to_f64_lossy()),
        }
    }
}

/// Mean cross-entropy of the head on precomputed max similarities plus the
/// L1 penalty, with the head gradient.
pub fn head_loss<T: Real>(head: &HeadWeights<T>, m: &[T], labels: &[usize], l1: f64) -> (f64, Vec<T>) {
    let n = labels.len();
    let logits = head.logits_batch(m, n).expect("max similarities match the head");
    let scale = T::one() / T::from_usize(n.max(1)).expect("count fits");
    let (ce, g_logits) = cross_entropy(&logits, labels, head.classes, scale);
    let mut grad = vec![T::zero(); head.weights.len()];
    crate::real::matmul(head.inputs, n, head.classes, m, true, &g_logits, false, &mut grad, false);
    let penalty = l1_penalty(head, T::from_f64_lossy(l1), &mut grad);
    ((ce + penalty).to_f64_lossy(), grad)
}

/// Baseline: shared per-channel encoder, concatenated embeddings and a
/// linear classifier with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardNet<T> {
    pub input: InputShape,
    pub encoder: Encoder<T>,
    pub weights: HeadWeights<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardGrads<T> {
    pub encoder: EncoderParams<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> StandardGrads<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = self.encoder.slices();
        out.push(&self.weights);
        out.push(&self.bias);
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.encoder.add_assign(&other.encoder);
        add_into(&mut self.weights, &other.weights);
        add_into(&mut self.bias, &other.bias);
    }
}

impl<T: Real> StandardNet<T> {
    pub fn features(&self) -> usize {
        self.input.channels * self.encoder.embedding_len()
    }

    pub fn embed(&self, samples: &[&RasterSample]) -> Result<Vec<T>> {
        check_samples(self.input, samples)?;
        let x = encoder_input(samples, true);
        self.encoder.encode_batch(&x, samples.len() * self.input.channels)
    }

    pub fn logits_from_features(&self, f: &[T], n: usize) -> Result<Vec<T>> {
        let mut logits = self.weights.logits_batch(f, n)?;
        for row in logits.chunks_exact_mut(self.weights.classes) {
            add_into(row, &self.bias);
        }
        Ok(logits)
    }

    pub fn logits(&self, samples: &[&RasterSample]) -> Result<Vec<T>> {
        let f = self.embed(samples)?;
        self.logits_from_features(&f, samples.len())
    }

    /// Summed cross-entropy times `scale` and its gradients.
    pub fn loss_chunk(
        &self,
        samples: &[&RasterSample],
        scale: T,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossParts, StandardGrads<T>)> {
        check_samples(self.input, samples)?;
        let n = samples.len();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let x = encoder_input(samples, true);
        let (f, act) = self.encoder.forward_train(&x, n * self.input.channels, dropout)?;
        let logits = self.logits_from_features(&f, n)?;
        let (ce, g_logits) = cross_entropy(&logits, &labels, self.weights.classes, scale);
        let (fdim, k) = (self.features(), self.weights.classes);
        let mut g_w = vec![T::zero(); fdim * k];
        crate::real::matmul(fdim, n, k, &f, true, &g_logits, false, &mut g_w, false);
        let mut g_b = vec![T::zero(); k];
        for row in g_logits.chunks_exact(k) {
            add_into(&mut g_b, row);
        }
        let mut g_f = vec![T::zero(); n * fdim];
        crate::real::matmul(n, k, fdim, &g_logits, false, &self.weights.weights, true, &mut g_f, false);
        let (g_enc, _) = self.encoder.backward(&act, &g_f, false);
        let ce = ce.to_f64_lossy();
        let parts = LossParts { total: ce, cross_entropy: ce, ..Default::default() };
        Ok((parts, StandardGrads { encoder: g_enc, weights: g_w, bias: g_b }))
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.encoder.params.slices_mut();
        out.push(self.weights.weights.as_mut_slice());
        out.push(self.bias.as_mut_slice());
        out
    }

    pub fn cast<U: Real>(&self) -> StandardNet<U> {
        StandardNet {
            input: self.input,
            encoder: self.encoder.cast(),
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|b| U::from_f64_lossy(b.to_f64_lossy())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    Standard(StandardNet<T>),
    Prototype(ProtoNet<T>),
}

impl<T: Real> Model<T> {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Standard(_) => ModelKind::StandardNn,
            Model::Prototype(p) => p.kind,
        }
    }

    pub fn input(&self) -> InputShape {
        match self {
            Model::Standard(m) => m.input,
            Model::Prototype(m) => m.input,
        }
    }

    pub fn encoder(&self) -> &Encoder<T> {
        match self {
            Model::Standard(m) => &m.encoder,
            Model::Prototype(m) => &m.encoder,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Standard(m) => m.weights.classes,
            Model::Prototype(m) => m.head.classes,
        }
    }

    pub fn logits(&self, samples: &[&RasterSample]) -> Result<Vec<T>> {
        match self {
            Model::Standard(m) => m.logits(samples),
            Model::Prototype(m) => m.logits(samples),
        }
    }

    pub fn as_prototype(&self) -> Option<&ProtoNet<T>> {
        match self {
            Model::Prototype(p) => Some(p),
            Model::Standard(_) => None,
        }
    }
}
