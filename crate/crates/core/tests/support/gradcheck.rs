//! Central-difference gradient checks in binary64. Each check returns the
//! largest relative error seen, or a description of the first failure.

#![allow(dead_code)]

use protogrid_core::data::RasterSample;
use protogrid_core::encoder::{Encoder, EncoderConfig, StageConfig};
use protogrid_core::head::{cross_entropy, HeadWeights, LossConfig};
use protogrid_core::model::{head_loss, InputShape, ModelKind, ProtoNet, StandardNet};
use protogrid_core::prototype::PrototypeBank;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding compare by absolute difference.
const FLOOR: f64 = 1e-5;
/// Entries checked per parameter tensor.
const PER_TENSOR: usize = 48;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn central<M: Clone>(model: &M, step: f64, perturb: &impl Fn(&mut M, f64), loss: &impl Fn(&M) -> f64) -> f64 {
    let mut plus = model.clone();
    perturb(&mut plus, step);
    let mut minus = model.clone();
    perturb(&mut minus, -step);
    (loss(&plus) - loss(&minus)) / (2.0 * step)
}

/// Evenly spread indices, at most `PER_TENSOR` of them.
fn sample_indices(len: usize) -> Vec<usize> {
    if len <= PER_TENSOR {
        return (0..len).collect();
    }
    (0..PER_TENSOR).map(|i| i * len / PER_TENSOR + (i * 7) % (len / PER_TENSOR).max(1)).collect()
}

/// Checks `analytic[t]` against central differences of `loss` for every
/// tensor `t` reachable through `tensor(model, t)`.
fn check_tensors<M: Clone>(
    name: &str,
    model: &M,
    analytic: &[Vec<f64>],
    tensor: impl Fn(&mut M, usize) -> &mut [f64],
    loss: impl Fn(&M) -> f64,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    let (mut checked, mut kinks) = (0usize, 0usize);
    for (t, grad) in analytic.iter().enumerate() {
        for j in sample_indices(grad.len()) {
            let perturb = |m: &mut M, h: f64| tensor(m, t)[j] += h;
            let numeric = central(model, STEP, &perturb, &loss);
            checked += 1;
            // A rectifier or max/min switch inside the step shows up as a
            // disagreement with the finer difference; such points have no
            // derivative to compare against.
            let fine = central(model, STEP / 10.0, &perturb, &loss);
            if rel_err(numeric, fine) > TOLERANCE {
                kinks += 1;
                continue;
            }
            let e = rel_err(grad[j], numeric);
            if !(e < TOLERANCE) {
                return Err(format!(
                    "{name}: tensor {t} entry {j}: analytic {:.9e} numeric {numeric:.9e} (rel {e:.2e})",
                    grad[j]
                ));
            }
            worst = worst.max(e);
        }
    }
    if kinks * 8 > checked {
        return Err(format!("{name}: {kinks} of {checked} entries sit on a kink"));
    }
    Ok(worst)
}

pub fn random_samples(n: usize, h: usize, w: usize, c: usize, classes: usize, seed: u64) -> Vec<RasterSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pixels = (0..h * w * c).map(|_| rng.gen::<f32>()).collect();
            RasterSample::new(i as u64, i % classes, h, w, c, pixels).expect("valid sample")
        })
        .collect()
}

pub fn small_encoder_config(in_channels: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels,
        stages: vec![StageConfig::standard(3), StageConfig::standard(4)],
        negative_slope: 0.01,
        embedding_h: 2,
        embedding_w: 2,
        dropout: 0.0,
    }
}

/// A 12x12, two-channel, three-class network with 2 prototypes per class and
/// random location scaling. 12 -> 6 -> 3 -> adaptive 2 exercises
/// overlapping adaptive bins.
pub fn small_net(kind: ModelKind, head_range: f64, seed: u64) -> (ProtoNet<f64>, Vec<RasterSample>) {
    let (h, w, c, k) = (12, 12, 2, 3);
    let samples = random_samples(6, h, w, c, k, seed);
    let in_channels = if kind.per_channel() { 1 } else { c };
    let encoder = Encoder::new(small_encoder_config(in_channels), h, w, seed + 1).expect("encoder");
    let groups = if kind.per_channel() { c } else { 1 };
    let mut bank = PrototypeBank::init(groups, k, 2, encoder.embedding_shape(), true, seed + 2).expect("bank");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    for s in bank.scaling.as_mut().expect("scaling on") {
        *s = rng.gen_range(0.5..1.5);
    }
    // Bring prototypes to the scale of the embeddings so that similarities
    // are not all saturated.
    let z = {
        let refs: Vec<&RasterSample> = samples.iter().collect();
        let x = protogrid_core::model::encoder_input::<f64>(&refs, kind.per_channel());
        encoder.encode_batch(&x, refs.len() * groups).expect("embed")
    };
    let d = bank.dim;
    for (a, v) in bank.vectors.chunks_exact_mut(d).enumerate() {
        let src = &z[(a * 5 % (z.len() / d)) * d..][..d];
        for (p, s) in v.iter_mut().zip(src) {
            *p = s + 0.3 * (*p - 0.5);
        }
    }
    let head = HeadWeights::uniform(bank.total(), k, head_range, seed + 4);
    let net = ProtoNet { kind, input: InputShape { height: h, width: w, channels: c }, encoder, bank, head, epsilon: 1e-4 };
    (net, samples)
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Encoder parameters and input under `L = <r, E(x)>`.
pub fn encoder_gradients() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for in_channels in [1, 2] {
        let enc = Encoder::<f64>::new(small_encoder_config(in_channels), 12, 12, 11).map_err(|e| e.to_string())?;
        let n = 3;
        let x = random_vec(n * enc.input_len(), 12);
        let r = random_vec(n * enc.embedding_len(), 13);
        let (_, act) = enc.forward_train(&x, n, None).map_err(|e| e.to_string())?;
        let (g, gx) = enc.backward(&act, &r, true);
        let dot = |z: Vec<f64>| z.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        let analytic: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        worst = worst.max(check_tensors(
            "encoder parameters",
            &enc,
            &analytic,
            |e, t| e.params.slices_mut().into_iter().nth(t).expect("tensor"),
            |e| dot(e.encode_batch(&x, n).expect("forward")),
        )?);
        let gx = gx.expect("input gradient requested");
        worst = worst.max(check_tensors(
            "encoder input",
            &x,
            &[gx],
            |x, _| x.as_mut_slice(),
            |x| dot(enc.encode_batch(x, n).expect("forward")),
        )?);
    }
    Ok(worst)
}

/// Similarity layer: embeddings, prototypes and scaling under
/// `L = <r, max similarity> + <q, distances>`.
pub fn similarity_gradients() -> Result<f64, String> {
    let (net, samples) = small_net(ModelKind::ProtoChannel, 0.3, 21);
    let refs: Vec<&RasterSample> = samples.iter().collect();
    let n = refs.len();
    let z = net.embed(&refs).map_err(|e| e.to_string())?;
    let bank = net.bank.clone();
    let fwd = bank.forward_batch(&z, n, net.epsilon).map_err(|e| e.to_string())?;
    let r = random_vec(fwd.max.len(), 22);
    let q = random_vec(fwd.distances.len(), 23);
    let loss = |bank: &PrototypeBank<f64>, z: &[f64]| {
        let f = bank.forward_batch(z, n, 1e-4).expect("forward");
        f.max.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
            + f.distances.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()
    };
    let g = bank.backward_batch(&z, &fwd, Some(&r), Some(&q), net.epsilon);
    let mut worst = check_tensors(
        "similarity embeddings",
        &z,
        &[g.embeddings.clone()],
        |z, _| z.as_mut_slice(),
        |z| loss(&bank, z),
    )?;
    let analytic = vec![g.vectors.clone(), g.scaling.clone().expect("scaling on")];
    worst = worst.max(check_tensors(
        "similarity prototypes and scaling",
        &bank,
        &analytic,
        |b, t| if t == 0 { b.vectors.as_mut_slice() } else { b.scaling.as_mut().expect("scaling").as_mut_slice() },
        |b| loss(b, &z),
    )?);
    Ok(worst)
}

pub fn cross_entropy_gradient() -> Result<f64, String> {
    let (n, k) = (5, 4);
    let logits = random_vec(n * k, 31).into_iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let labels = [0, 3, 1, 1, 2];
    let scale = 1.0 / n as f64;
    let (_, g) = cross_entropy(&logits, &labels, k, scale);
    check_tensors("cross entropy", &logits, &[g], |l, _| l.as_mut_slice(), |l| cross_entropy(l, &labels, k, scale).0)
}

/// First-stage loss with only the named terms switched on. A zero head makes
/// the cross-entropy constant, isolating the prototype terms.
fn stage_one_check(name: &str, cfg: LossConfig, head_range: f64, kind: ModelKind) -> Result<f64, String> {
    let (net, samples) = small_net(kind, head_range, 41);
    let refs: Vec<&RasterSample> = samples.iter().collect();
    let (_, grads) = net.stage_one_loss(&refs, &cfg, None, true).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    check_tensors(
        name,
        &net,
        &analytic,
        |m, t| m.stage_one_params_mut(true).into_iter().nth(t).expect("tensor"),
        |m| m.stage_one_loss(&refs, &cfg, None, true).expect("loss").0.total,
    )
}

fn only(cluster: f64, separation: f64, diversity: f64) -> LossConfig {
    LossConfig { cluster, separation, diversity, diversity_threshold: if diversity > 0.0 { 0.5 } else { 0.0 }, l1: 0.0 }
}

pub fn cluster_gradient() -> Result<f64, String> {
    stage_one_check("cluster loss", only(1.0, 0.0, 0.0), 0.0, ModelKind::ProtoChannel)
}

pub fn separation_gradient() -> Result<f64, String> {
    stage_one_check("separation loss", only(0.0, 1.0, 0.0), 0.0, ModelKind::ProtoChannel)
}

/// Diversity with a threshold large enough that some pairs are inside it.
pub fn diversity_gradient() -> Result<f64, String> {
    let (mut net, samples) = small_net(ModelKind::ProtoChannel, 0.0, 43);
    // Pull two prototypes of each group next to each other.
    let d = net.bank.dim;
    let per = net.bank.per_group();
    for g in 0..net.bank.groups {
        let a = g * per;
        let src: Vec<f64> = net.bank.vectors[a * d..(a + 1) * d].to_vec();
        for (k, v) in net.bank.vectors[(a + 1) * d..(a + 2) * d].iter_mut().enumerate() {
            *v = src[k] + 0.05 * (k as f64 + 1.0);
        }
    }
    let cfg = LossConfig { cluster: 0.0, separation: 0.0, diversity: 1.0, diversity_threshold: 1.0, l1: 0.0 };
    let refs: Vec<&RasterSample> = samples.iter().collect();
    let (parts, grads) = net.stage_one_loss(&refs, &cfg, None, true).map_err(|e| e.to_string())?;
    if !(parts.diversity > 0.0) {
        return Err("diversity fixture has no active pairs".into());
    }
    let analytic = vec![grads.vectors.clone()];
    check_tensors(
        "diversity loss",
        &net,
        &analytic,
        |m, _| m.bank.vectors.as_mut_slice(),
        |m| m.stage_one_loss(&refs, &cfg, None, true).expect("loss").0.total,
    )
}

/// Full first-stage loss (cross-entropy through a nonzero head plus every
/// prototype term) for encoder, prototypes and scaling, both bank layouts.
pub fn stage_one_gradient() -> Result<f64, String> {
    let cfg = LossConfig { cluster: 0.7, separation: 0.7, diversity: 0.1, diversity_threshold: 0.5, l1: 0.0 };
    let a = stage_one_check("stage one (channel)", cfg, 0.5, ModelKind::ProtoChannel)?;
    let b = stage_one_check("stage one (joint)", cfg, 0.5, ModelKind::ProtoJoint)?;
    Ok(a.max(b))
}

/// Head loss: cross-entropy plus L1 with no weight at exactly zero.
pub fn head_gradient() -> Result<f64, String> {
    let (net, samples) = small_net(ModelKind::ProtoChannel, 0.5, 51);
    let refs: Vec<&RasterSample> = samples.iter().collect();
    let m = net.forward(&refs).map_err(|e| e.to_string())?.similarity.max;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (_, g) = head_loss(&net.head, &m, &labels, 0.05);
    let via_model = net.stage_three_loss(&refs, 0.05).map_err(|e| e.to_string())?.1;
    if via_model != g {
        return Err("stage-three loss disagrees with the head loss on the same inputs".into());
    }
    check_tensors(
        "head loss",
        &net.head,
        &[g],
        |h, _| h.weights.as_mut_slice(),
        |h| head_loss(h, &m, &labels, 0.05).0,
    )
}

/// Baseline network: encoder, weights and bias.
pub fn standard_gradient() -> Result<f64, String> {
    let (h, w, c, k) = (12, 12, 2, 3);
    let samples = random_samples(5, h, w, c, k, 61);
    let refs: Vec<&RasterSample> = samples.iter().collect();
    let encoder = Encoder::new(small_encoder_config(1), h, w, 62).map_err(|e| e.to_string())?;
    let f = c * encoder.embedding_len();
    let net = StandardNet {
        input: InputShape { height: h, width: w, channels: c },
        encoder,
        weights: HeadWeights::uniform(f, k, 0.5, 63),
        bias: random_vec(k, 64),
    };
    let scale = 1.0 / refs.len() as f64;
    let (_, g) = net.loss_chunk(&refs, scale, None).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
    check_tensors(
        "standard network",
        &net,
        &analytic,
        |m, t| m.params_mut().into_iter().nth(t).expect("tensor"),
        |m| m.loss_chunk(&refs, scale, None).expect("loss").0.total,
    )
}

/// Every check, by name.
pub fn all() -> Vec<(&'static str, Result<f64, String>)> {
    vec![
        ("encoder", encoder_gradients()),
        ("similarity", similarity_gradients()),
        ("cross entropy", cross_entropy_gradient()),
        ("cluster", cluster_gradient()),
        ("separation", separation_gradient()),
        ("diversity", diversity_gradient()),
        ("stage one", stage_one_gradient()),
        ("head and l1", head_gradient()),
        ("standard network", standard_gradient()),
    ]
}
