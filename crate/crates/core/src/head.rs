//! Zero-bias softmax head over the max-similarity vector and the loss terms
//! of the first and third training stages.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prototype::{squared_distance, BatchSimilarity, PrototypeBank};
use crate::real::matmul;
use crate::{Error, Real, Result};

/// `inputs x classes` weight matrix. There is no bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub inputs: usize,
    pub classes: usize,
    pub weights: Vec<T>,
}

impl<T: Real> HeadWeights<T> {
    pub fn zeros(inputs: usize, classes: usize) -> Self {
        Self { inputs, classes, weights: vec![T::zero(); inputs * classes] }
    }

    /// Uniform `(-range, range)` initialisation.
    pub fn uniform(inputs: usize, classes: usize, range: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..inputs * classes)
            .map(|_| T::from_f64_lossy(if range > 0.0 { rng.gen_range(-range..range) } else { 0.0 }))
            .collect();
        Self { inputs, classes, weights }
    }

    #[inline]
    pub fn get(&self, input: usize, class: usize) -> T {
        self.weights[input * self.classes + class]
    }

    /// Logits for `n` stacked input vectors.
    pub fn logits_batch(&self, m: &[T], n: usize) -> Result<Vec<T>> {
        if m.len() != n * self.inputs {
            return Err(Error::Shape(format!(
                "head expects {} inputs per sample, got {} values for {n} samples",
                self.inputs,
                m.len()
            )));
        }
        let mut out = vec![T::zero(); n * self.classes];
        matmul(n, self.inputs, self.classes, m, false, &self.weights, false, &mut out, false);
        Ok(out)
    }

    pub fn l1_norm(&self) -> T {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    pub fn cast<U: Real>(&self) -> HeadWeights<U> {
        HeadWeights {
            inputs: self.inputs,
            classes: self.classes,
            weights: self.weights.iter().map(|w| U::from_f64_lossy(w.to_f64_lossy())).collect(),
        }
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exp: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exp.iter().copied().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities `softmax(m^T W)` for one max-similarity vector.
pub fn classify<T: Real>(m: &[T], head: &HeadWeights<T>) -> Result<Vec<T>> {
    Ok(softmax(&head.logits_batch(m, 1)?))
}

/// Summed cross-entropy over a batch of logits together with its gradient,
/// both multiplied by `scale`.
pub fn cross_entropy<T: Real>(logits: &[T], labels: &[usize], classes: usize, scale: T) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, (row, &y)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&l| (l - max).exp()).sum();
        let log_z = max + sum.ln();
        loss = loss + (log_z - row[y]);
        for (k, &l) in row.iter().enumerate() {
            let p = (l - log_z).exp();
            let target = if k == y { T::one() } else { T::zero() };
            grad[i * classes + k] = (p - target) * scale;
        }
    }
    (loss * scale, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub cluster: f64,
    pub separation: f64,
    pub diversity: f64,
    pub diversity_threshold: f64,
    pub l1: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cluster, self.separation, self.diversity, self.diversity_threshold, self.l1];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss coefficients must be finite and non-negative: {self:?}")));
        }
        if self.diversity > 0.0 && self.diversity_threshold <= 0.0 {
            return Err(Error::Config("diversity threshold must be positive when diversity is weighted".into()));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self { cluster: 0.0, separation: 0.0, diversity: 0.0, diversity_threshold: 0.0, l1: 0.0 }
    }
}

/// Minimum distance of one (sample, group) pair and where it occurs in
/// `BatchSimilarity::distances`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestPatch<T> {
    pub distance: T,
    pub index: usize,
}

fn nearest<T: Real>(
    bank: &PrototypeBank<T>,
    fwd: &BatchSimilarity<T>,
    labels: &[usize],
    same_class: bool,
) -> Vec<Option<NearestPatch<T>>> {
    let (cells, per_group, total) = (bank.cells(), bank.per_group(), bank.total());
    let mut out = Vec::with_capacity(fwd.samples * bank.groups);
    for (i, &y) in labels.iter().enumerate().take(fwd.samples) {
        for g in 0..bank.groups {
            let mut best: Option<NearestPatch<T>> = None;
            for p in 0..per_group {
                let a = g * per_group + p;
                if (bank.identity(a).class == y) != same_class {
                    continue;
                }
                let base = (i * total + a) * cells;
                for cell in 0..cells {
                    let d = fwd.distances[base + cell];
                    if best.is_none_or(|b| d < b.distance) {
                        best = Some(NearestPatch { distance: d, index: base + cell });
                    }
                }
            }
            out.push(best);
        }
    }
    out
}

/// Per (sample, group) minimum squared distance to a prototype of the
/// sample's class, `samples x groups`.
pub fn cluster_nearest<T: Real>(bank: &PrototypeBank<T>, fwd: &BatchSimilarity<T>, labels: &[usize]) -> Vec<NearestPatch<T>> {
    nearest(bank, fwd, labels, true).into_iter().map(|n| n.expect("every class owns prototypes")).collect()
}

/// Per (sample, group) minimum squared distance to a prototype of any
/// other class. `None` when the bank has a single class.
pub fn separation_nearest<T: Real>(
    bank: &PrototypeBank<T>,
    fwd: &BatchSimilarity<T>,
    labels: &[usize],
) -> Vec<Option<NearestPatch<T>>> {
    nearest(bank, fwd, labels, false)
}

fn mean<T: Real>(values: impl Iterator<Item = T>) -> T {
    let (sum, n) = values.fold((T::zero(), 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        T::zero()
    } else {
        sum / T::from_usize(n).expect("count fits")
    }
}

/// Mean over samples and groups of the distance to the nearest same-class
/// prototype patch.
pub fn cluster_loss<T: Real>(bank: &PrototypeBank<T>, fwd: &BatchSimilarity<T>, labels: &[usize]) -> T {
    mean(cluster_nearest(bank, fwd, labels).into_iter().map(|n| n.distance))
}

/// Negative mean over samples and groups of the distance to the nearest
/// wrong-class prototype patch.
pub fn separation_loss<T: Real>(bank: &PrototypeBank<T>, fwd: &BatchSimilarity<T>, labels: &[usize]) -> T {
    -mean(separation_nearest(bank, fwd, labels).into_iter().flatten().map(|n| n.distance))
}

/// Hinge `max(0, tau - |a - b|^2)` averaged over same-(class, group) pairs,
/// one value per group.
pub fn diversity_per_group<T: Real>(bank: &PrototypeBank<T>, tau: T) -> Vec<T> {
    (0..bank.groups)
        .map(|g| {
            mean((0..bank.classes).flat_map(|k| {
                (0..bank.per_class).flat_map(move |a| (a + 1..bank.per_class).map(move |b| (k, a, b)))
            })
            .map(|(k, a, b)| {
                let d = squared_distance(bank.vector(bank.index(g, k, a)), bank.vector(bank.index(g, k, b)));
                (tau - d).max(T::zero())
            }))
        })
        .collect()
}

/// Mean hinge over every same-(class, group) prototype pair; lies in
/// `[0, tau]`.
pub fn diversity_loss<T: Real>(bank: &PrototypeBank<T>, tau: T) -> T {
    mean(diversity_per_group(bank, tau).into_iter())
}

/// Adds `coeff * d(sum of per-group diversity)/d(prototype)` to `grad`.
pub fn diversity_grad<T: Real>(bank: &PrototypeBank<T>, tau: T, coeff: T, grad: &mut [T]) {
    let pairs = bank.classes * bank.per_class * (bank.per_class.saturating_sub(1)) / 2;
    if pairs == 0 || coeff == T::zero() {
        return;
    }
    let two = T::one() + T::one();
    let scale = coeff / T::from_usize(pairs).expect("count fits");
    let d = bank.dim;
    for g in 0..bank.groups {
        for k in 0..bank.classes {
            for a in 0..bank.per_class {
                for b in a + 1..bank.per_class {
                    let (ia, ib) = (bank.index(g, k, a), bank.index(g, k, b));
                    let dist = squared_distance(bank.vector(ia), bank.vector(ib));
                    if tau - dist <= T::zero() {
                        continue;
                    }
                    for t in 0..d {
                        let diff = two * (bank.vectors[ia * d + t] - bank.vectors[ib * d + t]) * scale;
                        grad[ia * d + t] = grad[ia * d + t] - diff;
                        grad[ib * d + t] = grad[ib * d + t] + diff;
                    }
                }
            }
        }
    }
}

/// Sum of absolute head weights and its subgradient scaled by `coeff`.
pub fn l1_penalty<T: Real>(head: &HeadWeights<T>, coeff: T, grad: &mut [T]) -> T {
    for (g, &w) in grad.iter_mut().zip(&head.weights) {
        if w > T::zero() {
            *g = *g + coeff;
        } else if w < T::zero() {
            *g = *g - coeff;
        }
    }
    head.l1_norm() * coeff
}
