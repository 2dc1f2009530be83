//! Local and global explanations of a prototype network.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::RasterSample;
use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::head::softmax;
use crate::model::ProtoNet;
use crate::prototype::{argmax, Provenance};
use crate::{Error, Real, Result};

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

/// Receptive fields of every embedding cell, raster order, found by pushing
/// single-pixel impulses through a linearised copy of the encoder
/// (all-ones kernels, zero bias, identity activation, pooling kept).
pub fn receptive_fields(config: &EncoderConfig, input_h: usize, input_w: usize) -> Result<Vec<PixelBox>> {
    let mut lin = config.clone();
    lin.negative_slope = 1.0;
    lin.dropout = 0.0;
    let plan = lin.plan(input_h, input_w)?;
    let mut cin = lin.in_channels;
    let mut kernels = Vec::new();
    let mut biases = Vec::new();
    for st in &lin.stages {
        kernels.push(vec![1.0f64; st.kernel * st.kernel * cin * st.out_channels]);
        biases.push(vec![0.0f64; st.out_channels]);
        cin = st.out_channels;
    }
    let encoder = Encoder::with_params(lin, input_h, input_w, EncoderParams { kernels, biases })?;
    let (eh, ew, d) = plan.embedding;
    let cells = eh * ew;
    let c = config.in_channels;
    let pixels = input_h * input_w;
    let mut boxes: Vec<Option<PixelBox>> = vec![None; cells];
    const BATCH: usize = 64;
    for start in (0..pixels).step_by(BATCH) {
        let n = BATCH.min(pixels - start);
        let mut input = vec![0.0f64; n * pixels * c];
        for i in 0..n {
            let p = start + i;
            for ch in 0..c {
                input[(i * pixels + p) * c + ch] = 1.0;
            }
        }
        let out = encoder.encode_batch(&input, n)?;
        for i in 0..n {
            let (r, col) = ((start + i) / input_w, (start + i) % input_w);
            for (cell, b) in boxes.iter_mut().enumerate() {
                let z = &out[(i * cells + cell) * d..][..d];
                if z.iter().any(|&v| v != 0.0) {
                    *b = Some(match *b {
                        None => PixelBox { row0: r, row1: r, col0: col, col1: col },
                        Some(bx) => PixelBox {
                            row0: bx.row0.min(r),
                            row1: bx.row1.max(r),
                            col0: bx.col0.min(col),
                            col1: bx.col1.max(col),
                        },
                    });
                }
            }
        }
    }
    boxes
        .into_iter()
        .enumerate()
        .map(|(cell, b)| b.ok_or_else(|| Error::Architecture(format!("embedding cell {cell} sees no input pixel"))))
        .collect()
}

/// Receptive field of a single embedding location.
pub fn receptive_field(config: &EncoderConfig, input_h: usize, input_w: usize, row: usize, col: usize) -> Result<PixelBox> {
    let plan = config.plan(input_h, input_w)?;
    let (eh, ew, _) = plan.embedding;
    if row >= eh || col >= ew {
        return Err(Error::OutOfRange(format!("location ({row}, {col}) outside the {eh}x{ew} embedding grid")));
    }
    Ok(receptive_fields(config, input_h, input_w)?[row * ew + col])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeScores {
    pub target: usize,
    /// `M_a * W[a, target]`, length A.
    pub scores: Vec<f64>,
    pub max_similarity: Vec<f64>,
    /// Grid cell of each maximum.
    pub argmax: Vec<usize>,
    pub logits: Vec<f64>,
    /// Set when some prototype has not been projected onto a training patch.
    pub unprojected: bool,
}

pub fn prototype_scores<T: Real>(net: &ProtoNet<T>, sample: &RasterSample, target: usize) -> Result<PrototypeScores> {
    if target >= net.classes() {
        return Err(Error::OutOfRange(format!("class {target} outside 0..{}", net.classes())));
    }
    let fwd = net.forward(&[sample])?;
    let a = net.bank.total();
    let scores = (0..a).map(|i| (fwd.similarity.max[i] * net.head.get(i, target)).to_f64_lossy()).collect();
    Ok(PrototypeScores {
        target,
        scores,
        max_similarity: fwd.similarity.max.iter().map(|v| v.to_f64_lossy()).collect(),
        argmax: fwd.similarity.argmax.clone(),
        logits: fwd.logits.iter().map(|v| v.to_f64_lossy()).collect(),
        unprojected: !net.bank.is_projected(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub prototype: usize,
    pub group: usize,
    /// Raster channel, `None` for a joint bank.
    pub channel: Option<usize>,
    pub class: usize,
    pub slot: usize,
    pub score: f64,
    pub max_similarity: f64,
    pub weight: f64,
    /// Embedding cell (row, col) of the maximum.
    pub location: (usize, usize),
    pub receptive_field: PixelBox,
    pub source: Option<Provenance>,
    pub source_field: Option<PixelBox>,
    pub scaling: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub sample_id: u64,
    pub label: usize,
    pub predicted: usize,
    pub probability: f64,
    pub unprojected: bool,
    pub grid: (usize, usize),
    /// Ranked by descending score.
    pub entries: Vec<ScoreEntry>,
}

pub fn local_explanation<T: Real>(net: &ProtoNet<T>, sample: &RasterSample, top_k: usize) -> Result<LocalExplanation> {
    let input_h = net.input.height;
    let input_w = net.input.width;
    let fields = receptive_fields(&net.encoder.config, input_h, input_w)?;
    local_explanation_with_fields(net, sample, top_k, &fields)
}

/// Same as [`local_explanation`] with receptive fields computed up front.
pub fn local_explanation_with_fields<T: Real>(
    net: &ProtoNet<T>,
    sample: &RasterSample,
    top_k: usize,
    fields: &[PixelBox],
) -> Result<LocalExplanation> {
    let logits: Vec<T> = net.logits(&[sample])?;
    let predicted = argmax(&logits);
    let probs = softmax(&logits);
    let ps = prototype_scores(net, sample, predicted)?;
    let gw = net.bank.grid_w;
    let mut order: Vec<usize> = (0..ps.scores.len()).collect();
    order.sort_by(|&a, &b| ps.scores[b].total_cmp(&ps.scores[a]).then(a.cmp(&b)));
    let entries = order
        .into_iter()
        .take(top_k)
        .map(|a| {
            let id = net.bank.identity(a);
            let cell = ps.argmax[a];
            let source = net.bank.provenance[a];
            ScoreEntry {
                prototype: a,
                group: id.group,
                channel: net.group_channel(id.group),
                class: id.class,
                slot: id.slot,
                score: ps.scores[a],
                max_similarity: ps.max_similarity[a],
                weight: net.head.get(a, predicted).to_f64_lossy(),
                location: (cell / gw, cell % gw),
                receptive_field: fields[cell],
                source,
                source_field: source.map(|p| fields[p.row * gw + p.col]),
                scaling: net.bank.scaling_grid(a).map(|s| s.iter().map(|v| v.to_f64_lossy()).collect()),
            }
        })
        .collect();
    Ok(LocalExplanation {
        sample_id: sample.id,
        label: sample.label,
        predicted,
        probability: probs[predicted].to_f64_lossy(),
        unprojected: ps.unprojected,
        grid: (net.bank.grid_h, gw),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub near_zero_fraction: f64,
}

impl WeightStats {
    fn of(values: impl Iterator<Item = f64>, near_zero: f64) -> Self {
        let (mut n, mut sum, mut max, mut small) = (0usize, 0.0, 0.0f64, 0usize);
        for v in values {
            let a = v.abs();
            n += 1;
            sum += a;
            max = max.max(a);
            small += usize::from(a < near_zero);
        }
        let n_f = n.max(1) as f64;
        Self { mean_abs: sum / n_f, max_abs: max, near_zero_fraction: small as f64 / n_f }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub group: usize,
    pub channel: Option<usize>,
    /// Over every weight leaving this group's prototypes.
    pub overall: WeightStats,
    /// Indexed by output class: weights from this group's prototypes into
    /// that class's logit.
    pub per_class: Vec<WeightStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub near_zero_threshold: f64,
    /// Head matrix, `A` rows ordered group, prototype class, slot.
    pub weights: Vec<Vec<f64>>,
    pub groups: Vec<GroupWeights>,
}

pub fn channel_weight_summary<T: Real>(net: &ProtoNet<T>, near_zero: f64) -> WeightSummary {
    let k = net.classes();
    let per = net.bank.per_group();
    let w: Vec<Vec<f64>> = net.head.weights.chunks_exact(k).map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect();
    let groups = (0..net.groups())
        .map(|g| {
            let rows = &w[g * per..(g + 1) * per];
            GroupWeights {
                group: g,
                channel: net.group_channel(g),
                overall: WeightStats::of(rows.iter().flatten().copied(), near_zero),
                per_class: (0..k).map(|c| WeightStats::of(rows.iter().map(|r| r[c]), near_zero)).collect(),
            }
        })
        .collect();
    WeightSummary { near_zero_threshold: near_zero, weights: w, groups }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    /// Correctly classified samples that passed the class filter.
    pub considered: usize,
    /// `(prototype, count)`, most frequent first, ties by index.
    pub prototypes: Vec<(usize, usize)>,
    /// Indexed by prototype group.
    pub groups: Vec<usize>,
}

/// How often each prototype gives the single highest score for the
/// predicted class, over correctly classified samples whose label is in
/// `classes` (all when `None`).
pub fn top_prototype_frequency<T: Real>(
    net: &ProtoNet<T>,
    samples: &[&RasterSample],
    classes: Option<&[usize]>,
) -> Result<FrequencyTable> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut groups = vec![0usize; net.groups()];
    let mut considered = 0;
    let a = net.bank.total();
    let k = net.classes();
    for chunk in samples.chunks(32) {
        let chunk: Vec<&RasterSample> =
            chunk.iter().copied().filter(|s| classes.is_none_or(|c| c.contains(&s.label))).collect();
        if chunk.is_empty() {
            continue;
        }
        let fwd = net.forward(&chunk)?;
        for (i, s) in chunk.iter().enumerate() {
            let pred = argmax(&fwd.logits[i * k..(i + 1) * k]);
            if pred != s.label {
                continue;
            }
            let scores: Vec<T> = (0..a).map(|p| fwd.similarity.max[i * a + p] * net.head.get(p, pred)).collect();
            let top = argmax(&scores);
            *counts.entry(top).or_default() += 1;
            groups[net.bank.identity(top).group] += 1;
            considered += 1;
        }
    }
    let mut prototypes: Vec<(usize, usize)> = counts.into_iter().collect();
    prototypes.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    Ok(FrequencyTable { considered, prototypes, groups })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalExplanation {
    pub weights: WeightSummary,
    pub frequency: FrequencyTable,
    pub class_filter: Option<Vec<usize>>,
}

pub fn global_explanation<T: Real>(
    net: &ProtoNet<T>,
    samples: &[&RasterSample],
    classes: Option<&[usize]>,
    near_zero: f64,
) -> Result<GlobalExplanation> {
    Ok(GlobalExplanation {
        weights: channel_weight_summary(net, near_zero),
        frequency: top_prototype_frequency(net, samples, classes)?,
        class_filter: classes.map(|c| c.to_vec()),
    })
}
