//! A fixed-weight two-channel model and an independent scalar-loop
//! recomputation of its forward pass.

#![allow(dead_code)]

use protogrid_core::data::RasterSample;
use protogrid_core::encoder::{Encoder, EncoderConfig, EncoderParams, StageConfig};
use protogrid_core::head::HeadWeights;
use protogrid_core::model::{InputShape, ModelKind, ProtoNet};
use protogrid_core::prototype::PrototypeBank;

pub const SIDE: usize = 8;
pub const CHANNELS: usize = 2;
pub const CLASSES: usize = 2;
pub const PER_CLASS: usize = 2;
pub const EPSILON: f64 = 1e-4;
const SLOPE: f64 = 0.01;
/// Stage widths; the last is the embedding depth.
const WIDTHS: [usize; 2] = [3, 2];

/// Deterministic pseudo-values in [-1, 1].
fn wave(i: usize, phase: f64) -> f64 {
    ((i as f64) * 0.7311 + phase).sin()
}

pub fn encoder_config() -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        stages: WIDTHS.iter().map(|&w| StageConfig::standard(w)).collect(),
        negative_slope: SLOPE,
        embedding_h: 2,
        embedding_w: 2,
        dropout: 0.0,
    }
}

fn kernel(stage: usize, cin: usize) -> Vec<f64> {
    (0..9 * cin * WIDTHS[stage]).map(|i| 0.6 * wave(i, 0.3 + stage as f64)).collect()
}

fn bias(stage: usize) -> Vec<f64> {
    (0..WIDTHS[stage]).map(|i| 0.1 * wave(i, 2.0 + stage as f64)).collect()
}

fn prototypes() -> Vec<f64> {
    let total = CHANNELS * CLASSES * PER_CLASS;
    (0..total * WIDTHS[1]).map(|i| 0.2 + 0.15 * wave(i, 1.1)).collect()
}

fn scaling() -> Vec<f64> {
    let total = CHANNELS * CLASSES * PER_CLASS;
    (0..total * 4).map(|i| 1.0 + 0.4 * wave(i, 0.5)).collect()
}

fn head() -> Vec<f64> {
    let total = CHANNELS * CLASSES * PER_CLASS;
    (0..total * CLASSES).map(|i| 0.8 * wave(i, 2.7)).collect()
}

pub fn model() -> ProtoNet<f64> {
    let params = EncoderParams { kernels: vec![kernel(0, 1), kernel(1, WIDTHS[0])], biases: vec![bias(0), bias(1)] };
    let encoder = Encoder::with_params(encoder_config(), SIDE, SIDE, params).expect("valid parameters");
    let total = CHANNELS * CLASSES * PER_CLASS;
    let bank = PrototypeBank {
        groups: CHANNELS,
        classes: CLASSES,
        per_class: PER_CLASS,
        dim: WIDTHS[1],
        grid_h: 2,
        grid_w: 2,
        vectors: prototypes(),
        scaling: Some(scaling()),
        provenance: vec![None; total],
    };
    ProtoNet {
        kind: ModelKind::ProtoChannel,
        input: InputShape { height: SIDE, width: SIDE, channels: CHANNELS },
        encoder,
        bank,
        head: HeadWeights { inputs: total, classes: CLASSES, weights: head() },
        epsilon: EPSILON,
    }
}

pub fn probe(id: u64) -> RasterSample {
    let pixels = (0..SIDE * SIDE * CHANNELS).map(|i| (0.5 + 0.5 * wave(i * 3 + id as usize, 0.9)) as f32).collect();
    RasterSample::new(id, (id % 2) as usize, SIDE, SIDE, CHANNELS, pixels).expect("valid probe")
}

/// Every intermediate of the reference forward pass for one sample.
pub struct Trace {
    /// `[channel][cell][depth]`
    pub embeddings: Vec<Vec<Vec<f64>>>,
    /// Scaled similarity, `[prototype][cell]`.
    pub similarity: Vec<Vec<f64>>,
    pub max: Vec<f64>,
    pub logits: Vec<f64>,
}

/// `image[y][x][c]`, zero padding 1, 3x3 kernel laid out `[ky][kx][cin][cout]`.
fn conv_leaky(image: &[Vec<Vec<f64>>], k: &[f64], b: &[f64], cout: usize) -> Vec<Vec<Vec<f64>>> {
    let h = image.len();
    let w = image[0].len();
    let cin = image[0][0].len();
    let mut out = vec![vec![vec![0.0; cout]; w]; h];
    for y in 0..h {
        for x in 0..w {
            for o in 0..cout {
                let mut acc = b[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for c in 0..cin {
                            acc += k[((ky * 3 + kx) * cin + c) * cout + o] * image[iy as usize][ix as usize][c];
                        }
                    }
                }
                out[y][x][o] = if acc >= 0.0 { acc } else { SLOPE * acc };
            }
        }
    }
    out
}

fn pool2(image: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let (h, w, c) = (image.len() / 2, image[0].len() / 2, image[0][0].len());
    let mut out = vec![vec![vec![0.0; c]; w]; h];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let s = image[2 * y][2 * x][ch]
                    + image[2 * y + 1][2 * x][ch]
                    + image[2 * y][2 * x + 1][ch]
                    + image[2 * y + 1][2 * x + 1][ch];
                out[y][x][ch] = s / 4.0;
            }
        }
    }
    out
}

pub fn reference(sample: &RasterSample) -> Trace {
    let total = CHANNELS * CLASSES * PER_CLASS;
    let (d, per) = (WIDTHS[1], CLASSES * PER_CLASS);
    let protos = prototypes();
    let omega = scaling();
    let psi = head();
    let mut embeddings = Vec::new();
    let mut similarity = vec![Vec::new(); total];
    let mut max = vec![0.0; total];
    for ch in 0..CHANNELS {
        let image: Vec<Vec<Vec<f64>>> = (0..SIDE)
            .map(|y| (0..SIDE).map(|x| vec![sample.pixels[(y * SIDE + x) * CHANNELS + ch] as f64]).collect())
            .collect();
        let s1 = pool2(&conv_leaky(&image, &kernel(0, 1), &bias(0), WIDTHS[0]));
        let s2 = pool2(&conv_leaky(&s1, &kernel(1, WIDTHS[0]), &bias(1), WIDTHS[1]));
        // The grid is already 2x2, so the adaptive pool is the identity.
        let cells: Vec<Vec<f64>> = (0..4).map(|c| s2[c / 2][c % 2].clone()).collect();
        for p in 0..per {
            let a = ch * per + p;
            let mut best = f64::NEG_INFINITY;
            for (c, z) in cells.iter().enumerate() {
                let dist: f64 = (0..d).map(|t| (z[t] - protos[a * d + t]).powi(2)).sum();
                let s = ((dist + 1.0) / (dist + EPSILON)).ln() * omega[a * 4 + c];
                similarity[a].push(s);
                if s > best {
                    best = s;
                }
            }
            max[a] = best;
        }
        embeddings.push(cells);
    }
    let logits = (0..CLASSES).map(|k| (0..total).map(|a| max[a] * psi[a * CLASSES + k]).sum()).collect();
    Trace { embeddings, similarity, max, logits }
}

/// Largest absolute difference between the model and the reference at
/// every stage, `(embeddings, similarity grid, max vector, logits)`.
pub fn compare(net: &ProtoNet<f64>, sample: &RasterSample) -> (f64, f64, f64, f64) {
    let reference = reference(sample);
    let fwd = net.forward(&[sample]).expect("forward");
    let d = WIDTHS[1];
    let mut e_emb = 0.0f64;
    for ch in 0..CHANNELS {
        for c in 0..4 {
            for t in 0..d {
                let got = fwd.embeddings[(ch * 4 + c) * d + t];
                e_emb = e_emb.max((got - reference.embeddings[ch][c][t]).abs());
            }
        }
    }
    let total = CHANNELS * CLASSES * PER_CLASS;
    let mut e_sim = 0.0f64;
    for a in 0..total {
        let grid = net.bank.scaling_grid(a).expect("scaling on");
        for c in 0..4 {
            let got = fwd.similarity.log_ratio[a * 4 + c] * grid[c];
            e_sim = e_sim.max((got - reference.similarity[a][c]).abs());
        }
    }
    let e_max = fwd.similarity.max.iter().zip(&reference.max).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let e_log = fwd.logits.iter().zip(&reference.logits).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    (e_emb, e_sim, e_max, e_log)
}
