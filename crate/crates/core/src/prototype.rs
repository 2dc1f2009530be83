//! Prototype similarity layer: log-ratio similarity to every prototype at
//! every embedding location, optional location scaling, max pooling and the
//! projection of prototypes onto training patches.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Where a projected prototype came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_id: u64,
    pub row: usize,
    pub col: usize,
    pub class: usize,
    /// Prototype group: the raster channel for channel-specific banks, 0 for
    /// a joint bank.
    pub channel: usize,
}

/// Identity of one prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeId {
    pub group: usize,
    pub class: usize,
    pub slot: usize,
}

/// All prototypes of a model.
///
/// Prototypes are ordered group-major, then class, then slot: prototype
/// `(g, k, n)` sits at flat index `(g * classes + k) * per_class + n`, which
/// is also its position in the concatenated max-similarity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T> {
    pub groups: usize,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `total x dim`
    pub vectors: Vec<T>,
    /// `total x grid_h x grid_w`; `None` means scaling is fixed at 1.
    pub scaling: Option<Vec<T>>,
    pub provenance: Vec<Option<Provenance>>,
}

impl<T: Real> PrototypeBank<T> {
    /// Prototypes drawn uniformly from `[0, 1)`, scaling grids set to one.
    pub fn init(
        groups: usize,
        classes: usize,
        per_class: usize,
        embedding: (usize, usize, usize),
        location_scaling: bool,
        seed: u64,
    ) -> Result<Self> {
        let (grid_h, grid_w, dim) = embedding;
        if groups == 0 || classes == 0 || per_class == 0 || dim == 0 {
            return Err(Error::Config("prototype bank dimensions must be positive".into()));
        }
        let total = groups * classes * per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = (0..total * dim).map(|_| T::from_f64_lossy(rng.gen::<f64>())).collect();
        let scaling = location_scaling.then(|| vec![T::one(); total * grid_h * grid_w]);
        Ok(Self {
            groups,
            classes,
            per_class,
            dim,
            grid_h,
            grid_w,
            vectors,
            scaling,
            provenance: vec![None; total],
        })
    }

    /// Prototypes per group (`N` = classes x per-class count).
    pub fn per_group(&self) -> usize {
        self.classes * self.per_class
    }

    /// Total prototype count `A`.
    pub fn total(&self) -> usize {
        self.groups * self.per_group()
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    pub fn index(&self, group: usize, class: usize, slot: usize) -> usize {
        (group * self.classes + class) * self.per_class + slot
    }

    #[inline]
    pub fn identity(&self, index: usize) -> PrototypeId {
        let slot = index % self.per_class;
        let class = (index / self.per_class) % self.classes;
        let group = index / self.per_group();
        PrototypeId { group, class, slot }
    }

    #[inline]
    pub fn vector(&self, index: usize) -> &[T] {
        &self.vectors[index * self.dim..][..self.dim]
    }

    pub fn group_vectors(&self, group: usize) -> &[T] {
        let n = self.per_group();
        &self.vectors[group * n * self.dim..][..n * self.dim]
    }

    pub fn group_scaling(&self, group: usize) -> Option<&[T]> {
        let n = self.per_group() * self.cells();
        self.scaling.as_ref().map(|s| &s[group * n..][..n])
    }

    pub fn scaling_grid(&self, index: usize) -> Option<&[T]> {
        let c = self.cells();
        self.scaling.as_ref().map(|s| &s[index * c..][..c])
    }

    pub fn is_projected(&self) -> bool {
        self.provenance.iter().all(Option::is_some)
    }

    pub fn cast<U: Real>(&self) -> PrototypeBank<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect::<Vec<U>>();
        PrototypeBank {
            groups: self.groups,
            classes: self.classes,
            per_class: self.per_class,
            dim: self.dim,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            vectors: conv(&self.vectors),
            scaling: self.scaling.as_ref().map(conv),
            provenance: self.provenance.clone(),
        }
    }
}

#[inline]
pub(crate) fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// `ln((D + 1) / (D + eps))`
#[inline]
pub fn log_ratio<T: Real>(distance: T, eps: T) -> T {
    ((distance + T::one()) / (distance + eps)).ln()
}

/// Similarity of one embedding to one channel's prototypes at every
/// location.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrid<T> {
    /// `N x h x w`, scaled by the location grids.
    pub values: Vec<T>,
    /// Squared distances, same layout.
    pub distances: Vec<T>,
    pub prototypes: usize,
    pub h: usize,
    pub w: usize,
    pub epsilon: T,
}

/// Similarity grid of an `h x w x d` embedding against `N` prototypes of
/// dimension `d`, optionally multiplied by `N x h x w` scaling grids.
pub fn similarity_grid<T: Real>(
    embedding: &[T],
    h: usize,
    w: usize,
    prototypes: &[T],
    scaling: Option<&[T]>,
    epsilon: T,
) -> Result<SimilarityGrid<T>> {
    if epsilon.partial_cmp(&T::zero()) != Some(core::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("similarity epsilon must be positive, got {epsilon}")));
    }
    let cells = h * w;
    if cells == 0 || !embedding.len().is_multiple_of(cells) {
        return Err(Error::Shape(format!("embedding of {} values is not a {h}x{w} grid", embedding.len())));
    }
    let d = embedding.len() / cells;
    if d == 0 || !prototypes.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "prototype buffer of {} values does not hold {d}-dimensional vectors",
            prototypes.len()
        )));
    }
    let n = prototypes.len() / d;
    if let Some(s) = scaling {
        if s.len() != n * cells {
            return Err(Error::Shape(format!("scaling grids hold {} values, expected {}", s.len(), n * cells)));
        }
    }
    let mut distances = vec![T::zero(); n * cells];
    let mut values = vec![T::zero(); n * cells];
    for p in 0..n {
        let proto = &prototypes[p * d..][..d];
        for cell in 0..cells {
            let dist = squared_distance(&embedding[cell * d..][..d], proto);
            let idx = p * cells + cell;
            distances[idx] = dist;
            let sim = log_ratio(dist, epsilon);
            values[idx] = match scaling {
                Some(s) => sim * s[idx],
                None => sim,
            };
        }
    }
    Ok(SimilarityGrid { values, distances, prototypes: n, h, w, epsilon })
}

/// Index of the maximum; ties go to the earliest (raster order) entry.
#[inline]
pub(crate) fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-prototype maximum over the grid and its `(row, col)`.
pub fn max_pool_similarity<T: Real>(grid: &SimilarityGrid<T>) -> ChannelMaxima<T> {
    let cells = grid.h * grid.w;
    grid.values
        .chunks_exact(cells)
        .map(|g| {
            let i = argmax(g);
            (g[i], (i / grid.w, i % grid.w))
        })
        .unzip()
}

/// Maximum similarity of each prototype and the (row, col) where it occurs.
pub type ChannelMaxima<T> = (Vec<T>, Vec<(usize, usize)>);

/// Concatenated per-channel maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxSimVector<T> {
    pub values: Vec<T>,
    pub positions: Vec<(usize, usize)>,
}

/// Concatenates per-channel max vectors channel by channel; all must have the
/// same length.
pub fn concat_max_similarities<T: Real>(per_channel: &[ChannelMaxima<T>]) -> Result<MaxSimVector<T>> {
    let n = per_channel.first().map_or(0, |c| c.0.len());
    let mut values = Vec::with_capacity(n * per_channel.len());
    let mut positions = Vec::with_capacity(n * per_channel.len());
    for (j, (v, p)) in per_channel.iter().enumerate() {
        if v.len() != n || p.len() != n {
            return Err(Error::Shape(format!(
                "channel {j} supplies {} maxima, channel 0 supplies {n}",
                v.len()
            )));
        }
        values.extend_from_slice(v);
        positions.extend_from_slice(p);
    }
    Ok(MaxSimVector { values, positions })
}

/// Similarity pass over a batch of embedded samples.
///
/// `embeddings` holds `samples x groups x (h*w) x d` values.
#[derive(Debug, Clone)]
pub struct BatchSimilarity<T> {
    pub samples: usize,
    /// `samples x groups x per_group x cells`
    pub distances: Vec<T>,
    /// Unscaled log-ratio similarities, same layout.
    pub log_ratio: Vec<T>,
    /// `samples x total`
    pub max: Vec<T>,
    /// Grid cell of every maximum, `samples x total`.
    pub argmax: Vec<usize>,
}

impl<T: Real> PrototypeBank<T> {
    fn check_embeddings(&self, embeddings: &[T], samples: usize) -> Result<()> {
        let expect = samples * self.groups * self.cells() * self.dim;
        if embeddings.len() != expect {
            return Err(Error::Shape(format!(
                "{} embedding values for {samples} samples, expected {expect}",
                embeddings.len()
            )));
        }
        Ok(())
    }

    pub fn forward_batch(&self, embeddings: &[T], samples: usize, epsilon: T) -> Result<BatchSimilarity<T>> {
        self.check_embeddings(embeddings, samples)?;
        let (cells, d, per_group, total) = (self.cells(), self.dim, self.per_group(), self.total());
        let mut distances = vec![T::zero(); samples * total * cells];
        let mut log_ratio_v = vec![T::zero(); samples * total * cells];
        let mut max = vec![T::zero(); samples * total];
        let mut arg = vec![0usize; samples * total];
        let mut scaled = vec![T::zero(); cells];
        for i in 0..samples {
            for g in 0..self.groups {
                let z = &embeddings[(i * self.groups + g) * cells * d..][..cells * d];
                for p in 0..per_group {
                    let a = g * per_group + p;
                    let proto = self.vector(a);
                    let base = (i * total + a) * cells;
                    for cell in 0..cells {
                        let dist = squared_distance(&z[cell * d..][..d], proto);
                        let lr = log_ratio(dist, epsilon);
                        distances[base + cell] = dist;
                        log_ratio_v[base + cell] = lr;
                        scaled[cell] = match self.scaling_grid(a) {
                            Some(s) => lr * s[cell],
                            None => lr,
                        };
                    }
                    let best = argmax(&scaled);
                    max[i * total + a] = scaled[best];
                    arg[i * total + a] = best;
                }
            }
        }
        if !crate::real::all_finite(&max) {
            return Err(Error::Numeric { stage: "prototype similarity".into() });
        }
        Ok(BatchSimilarity { samples, distances, log_ratio: log_ratio_v, max, argmax: arg })
    }

    /// Back-propagates gradients of the max-similarity vector (`grad_max`,
    /// `samples x total`) and of the raw distance grids (`grad_dist`, same
    /// layout as `BatchSimilarity::distances`) to embeddings, prototype
    /// vectors and scaling grids.
    pub fn backward_batch(
        &self,
        embeddings: &[T],
        fwd: &BatchSimilarity<T>,
        grad_max: Option<&[T]>,
        grad_dist: Option<&[T]>,
        epsilon: T,
    ) -> SimilarityGrads<T> {
        let (cells, d, per_group, total) = (self.cells(), self.dim, self.per_group(), self.total());
        let samples = fwd.samples;
        let mut g_dist = match grad_dist {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); samples * total * cells],
        };
        let mut g_scaling = self.scaling.as_ref().map(|s| vec![T::zero(); s.len()]);
        if let Some(gm) = grad_max {
            for i in 0..samples {
                for a in 0..total {
                    let gv = gm[i * total + a];
                    if gv == T::zero() {
                        continue;
                    }
                    let cell = fwd.argmax[i * total + a];
                    let idx = (i * total + a) * cells + cell;
                    let dist = fwd.distances[idx];
                    let omega = match self.scaling_grid(a) {
                        Some(s) => {
                            let gs = g_scaling.as_mut().expect("scaling present");
                            gs[a * cells + cell] = gs[a * cells + cell] + gv * fwd.log_ratio[idx];
                            s[cell]
                        }
                        None => T::one(),
                    };
                    let dlr_dd = T::one() / (dist + T::one()) - T::one() / (dist + epsilon);
                    g_dist[idx] = g_dist[idx] + gv * omega * dlr_dd;
                }
            }
        }
        let two = T::one() + T::one();
        let mut g_emb = vec![T::zero(); embeddings.len()];
        let mut g_vec = vec![T::zero(); self.vectors.len()];
        for i in 0..samples {
            for g in 0..self.groups {
                let zoff = (i * self.groups + g) * cells * d;
                for p in 0..per_group {
                    let a = g * per_group + p;
                    let base = (i * total + a) * cells;
                    for cell in 0..cells {
                        let gd = g_dist[base + cell];
                        if gd == T::zero() {
                            continue;
                        }
                        let z = &embeddings[zoff + cell * d..][..d];
                        let proto = &self.vectors[a * d..][..d];
                        let gz = &mut g_emb[zoff + cell * d..][..d];
                        let gp = &mut g_vec[a * d..][..d];
                        for k in 0..d {
                            let diff = two * gd * (z[k] - proto[k]);
                            gz[k] = gz[k] + diff;
                            gp[k] = gp[k] - diff;
                        }
                    }
                }
            }
        }
        SimilarityGrads { embeddings: g_emb, vectors: g_vec, scaling: g_scaling }
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityGrads<T> {
    pub embeddings: Vec<T>,
    pub vectors: Vec<T>,
    pub scaling: Option<Vec<T>>,
}

/// Dropout-free embeddings of the training split, used as projection
/// candidates. `values` holds `samples x groups x cells x dim`.
#[derive(Debug, Clone)]
pub struct CandidatePatches<'a, T> {
    pub ids: &'a [u64],
    pub labels: &'a [usize],
    pub values: &'a [T],
}

/// Replaces every prototype with the closest training patch of its own class
/// and group. Ties go to the smallest sample id, then raster order. Returns
/// the projected bank and each prototype's distance before replacement.
pub fn project_prototypes<T: Real>(
    bank: &PrototypeBank<T>,
    candidates: &CandidatePatches<'_, T>,
) -> Result<(PrototypeBank<T>, Vec<T>)> {
    let (cells, d) = (bank.cells(), bank.dim);
    let n = candidates.ids.len();
    if candidates.labels.len() != n {
        return Err(Error::Shape("candidate ids and labels differ in length".into()));
    }
    bank.check_embeddings(candidates.values, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| candidates.ids[i]);
    let mut out = bank.clone();
    let mut distances = vec![T::zero(); bank.total()];
    for (a, slot) in distances.iter_mut().enumerate() {
        let id = bank.identity(a);
        let proto = bank.vector(a);
        let mut best: Option<(T, usize, usize)> = None;
        for &i in order.iter().filter(|&&i| candidates.labels[i] == id.class) {
            let z = &candidates.values[(i * bank.groups + id.group) * cells * d..][..cells * d];
            for cell in 0..cells {
                let dist = squared_distance(&z[cell * d..][..d], proto);
                if best.is_none_or(|(b, _, _)| dist < b) {
                    best = Some((dist, i, cell));
                }
            }
        }
        let (dist, i, cell) = best.ok_or(Error::Projection { class: id.class, channel: id.group })?;
        let z = &candidates.values[((i * bank.groups + id.group) * cells + cell) * d..][..d];
        out.vectors[a * d..][..d].copy_from_slice(z);
        out.provenance[a] = Some(Provenance {
            sample_id: candidates.ids[i],
            row: cell / bank.grid_w,
            col: cell % bank.grid_w,
            class: id.class,
            channel: id.group,
        });
        *slot = dist;
    }
    Ok((out, distances))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_distance_peaks_at_log_inverse_epsilon() {
        let z = [0.5f64, -0.25, 1.0];
        let g = similarity_grid(&z, 1, 1, &z, None, 1e-4).unwrap();
        assert!((g.values[0] - 9.210_340_371_976_184).abs() < 1e-9);
        assert!((g.values[0] - (1.0f64 / 1e-4).ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_scaling_zeroes_similarity() {
        let z = [0.5, 0.1, 2.0, 3.0];
        let protos = [0.4, 0.0];
        let scaling = [0.0, 1.0];
        let g = similarity_grid(&z, 1, 2, &protos, Some(&scaling), 1e-4).unwrap();
        assert_eq!(g.values[0], 0.0);
        assert!(g.values[1] > 0.0);
    }

    #[test]
    fn non_positive_epsilon_is_rejected() {
        assert!(matches!(similarity_grid(&[1.0], 1, 1, &[1.0], None, 0.0), Err(Error::Config(_))));
        assert!(matches!(similarity_grid(&[1.0], 1, 1, &[1.0], None, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn grid_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (h, w, d, n) = (2, 2, 3, 2);
        let z = rand_vec(&mut rng, h * w * d);
        let p = rand_vec(&mut rng, n * d);
        let s = rand_vec(&mut rng, n * h * w);
        let eps = 1e-4;
        let g = similarity_grid(&z, h, w, &p, Some(&s), eps).unwrap();
        for proto in 0..n {
            for u in 0..h {
                for v in 0..w {
                    let mut dist = 0.0;
                    for k in 0..d {
                        let diff = z[(u * w + v) * d + k] - p[proto * d + k];
                        dist += diff * diff;
                    }
                    let want = ((dist + 1.0) / (dist + eps)).ln() * s[(proto * h + u) * w + v];
                    assert!((g.values[(proto * h + u) * w + v] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn max_pool_breaks_ties_in_raster_order() {
        let grid = SimilarityGrid {
            values: vec![2.0; 6],
            distances: vec![0.0; 6],
            prototypes: 1,
            h: 2,
            w: 3,
            epsilon: 1e-4,
        };
        assert_eq!(max_pool_similarity(&grid), (vec![2.0], vec![(0, 0)]));
        let mut peaked = grid.clone();
        peaked.values[4] = 5.0;
        assert_eq!(max_pool_similarity(&peaked), (vec![5.0], vec![(1, 1)]));
    }

    #[test]
    fn max_pool_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, h, w) = (4, 3, 5);
        let values = rand_vec(&mut rng, n * h * w);
        let grid = SimilarityGrid { values: values.clone(), distances: values.clone(), prototypes: n, h, w, epsilon: 1e-4 };
        let (m, pos) = max_pool_similarity(&grid);
        for p in 0..n {
            let mut best = (f64::NEG_INFINITY, (0, 0));
            for u in 0..h {
                for v in 0..w {
                    let x = values[(p * h + u) * w + v];
                    if x > best.0 {
                        best = (x, (u, v));
                    }
                }
            }
            assert_eq!((m[p], pos[p]), best);
        }
    }

    #[test]
    fn concat_lengths() {
        let ch = |n: usize| (vec![0.0f32; n], vec![(0, 0); n]);
        assert_eq!(concat_max_similarities(&[ch(50), ch(50), ch(50)]).unwrap().values.len(), 150);
        assert_eq!(concat_max_similarities(&[ch(90), ch(90), ch(90)]).unwrap().values.len(), 270);
        let single = concat_max_similarities(&[(vec![1.0f32, 2.0], vec![(0, 1), (1, 0)])]).unwrap();
        assert_eq!(single.values, vec![1.0, 2.0]);
        assert_eq!(single.positions, vec![(0, 1), (1, 0)]);
        assert!(concat_max_similarities(&[ch(3), ch(2)]).is_err());
    }

    #[test]
    fn flat_index_is_a_bijection() {
        let bank: PrototypeBank<f32> = PrototypeBank::init(3, 10, 5, (2, 2, 4), true, 0).unwrap();
        let mut seen = vec![false; bank.total()];
        for g in 0..3 {
            for k in 0..10 {
                for n in 0..5 {
                    let a = bank.index(g, k, n);
                    assert!(!seen[a]);
                    seen[a] = true;
                    assert_eq!(bank.identity(a), PrototypeId { group: g, class: k, slot: n });
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn projection_matches_exhaustive_search_and_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (groups, classes, per_class, h, w, d) = (2, 2, 2, 2, 2, 3);
        let bank: PrototypeBank<f64> = PrototypeBank::init(groups, classes, per_class, (h, w, d), true, 1).unwrap();
        let n = 5;
        let ids: Vec<u64> = vec![40, 10, 30, 20, 50];
        let labels = vec![0, 1, 0, 1, 1];
        let values = rand_vec(&mut rng, n * groups * h * w * d);
        let cand = CandidatePatches { ids: &ids, labels: &labels, values: &values };
        let (projected, _) = project_prototypes(&bank, &cand).unwrap();
        for a in 0..bank.total() {
            let id = bank.identity(a);
            let mut best = (f64::INFINITY, 0u64, 0usize);
            for i in 0..n {
                if labels[i] != id.class {
                    continue;
                }
                for cell in 0..h * w {
                    let off = ((i * groups + id.group) * h * w + cell) * d;
                    let dist = squared_distance(&values[off..off + d], bank.vector(a));
                    if dist < best.0 || (dist == best.0 && (ids[i], cell) < (best.1, best.2)) {
                        best = (dist, ids[i], cell);
                    }
                }
            }
            let prov = projected.provenance[a].unwrap();
            assert_eq!((prov.sample_id, prov.row * w + prov.col), (best.1, best.2));
            assert_eq!((prov.class, prov.channel), (id.class, id.group));
        }
        assert!(projected.is_projected());
        assert_eq!(projected.scaling, bank.scaling);
        let (again, dist) = project_prototypes(&projected, &cand).unwrap();
        assert_eq!(again.vectors, projected.vectors);
        assert!(dist.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projection_without_class_samples_fails() {
        let bank: PrototypeBank<f64> = PrototypeBank::init(1, 2, 1, (1, 1, 2), false, 1).unwrap();
        let ids = [0u64];
        let labels = [0usize];
        let values = [0.0, 0.0];
        let cand = CandidatePatches { ids: &ids, labels: &labels, values: &values };
        assert_eq!(project_prototypes(&bank, &cand).unwrap_err(), Error::Projection { class: 1, channel: 0 });
    }

    proptest::proptest! {
        #[test]
        fn similarity_strictly_decreases_with_distance(
            d1 in 0.0f64..50.0, gap in 1e-6f64..50.0, eps in 1e-6f64..0.99,
        ) {
            let d2 = d1 + gap;
            proptest::prop_assert!(log_ratio(d1, eps) > log_ratio(d2, eps));
            proptest::prop_assert!(log_ratio(d2, eps) > 0.0);
        }
    }
}
