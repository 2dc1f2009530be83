//! Raster samples, dataset splits and the synthetic channel-MNIST task.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One `height x width x channels` grid stored row-major with the channel
/// index fastest, plus its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterSample {
    pub id: u64,
    pub label: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl RasterSample {
    pub fn new(
        id: u64,
        label: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "sample {id}: dimensions {height}x{width}x{channels} must all be at least 1"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "sample {id}: {} values for a {height}x{width}x{channels} grid",
                pixels.len()
            )));
        }
        if let Some(pos) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("sample {id}: non-finite pixel at flat index {pos}")));
        }
        Ok(Self { id, label, height, width, channels, pixels })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    /// Copy of one channel as a `height x width` grid.
    pub fn channel(&self, channel: usize) -> Vec<f32> {
        self.pixels.iter().skip(channel).step_by(self.channels).copied().collect()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Train / validation / test partition sharing one grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<RasterSample>,
    pub validation: Vec<RasterSample>,
    pub test: Vec<RasterSample>,
    pub num_classes: usize,
    pub channel_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl DatasetSplit {
    pub fn samples(&self, kind: SplitKind) -> &[RasterSample] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &RasterSample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.all().next().map(RasterSample::shape)
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn find(&self, id: u64) -> Option<&RasterSample> {
        self.all().find(|s| s.id == id)
    }

    /// Checks the split invariants: disjoint ids, labels below the class
    /// count, one shared geometry matching the channel names, and no empty
    /// split.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Dataset("number of classes must be at least 1".into()));
        }
        for (kind, name) in [
            (SplitKind::Train, "train"),
            (SplitKind::Validation, "validation"),
            (SplitKind::Test, "test"),
        ] {
            if self.samples(kind).is_empty() {
                return Err(Error::Dataset(format!("{name} split is empty")));
            }
        }
        let first = self.shape().expect("splits are nonempty");
        if first.2 != self.channel_names.len() {
            return Err(Error::Shape(format!(
                "samples have {} channels but {} channel names were given",
                first.2,
                self.channel_names.len()
            )));
        }
        let mut ids = BTreeSet::new();
        for s in self.all() {
            if s.shape() != first {
                return Err(Error::Shape(format!(
                    "sample {} has shape {:?}, expected {:?}",
                    s.id,
                    s.shape(),
                    first
                )));
            }
            if s.label >= self.num_classes {
                return Err(Error::Dataset(format!(
                    "sample {} has label {} but there are only {} classes",
                    s.id, s.label, self.num_classes
                )));
            }
            if !ids.insert(s.id) {
                return Err(Error::Dataset(format!("sample id {} appears more than once", s.id)));
            }
        }
        Ok(())
    }

    /// Per-channel `(min, max, mean)` over every sample of every split.
    pub fn channel_stats(&self) -> Vec<ChannelStats> {
        let c = self.channels();
        let mut stats = vec![ChannelStats { min: f64::INFINITY, max: f64::NEG_INFINITY, mean: 0.0 }; c];
        let mut count = 0usize;
        for s in self.all() {
            for px in s.pixels.chunks_exact(s.channels) {
                for (st, &v) in stats.iter_mut().zip(px) {
                    let v = v as f64;
                    st.min = st.min.min(v);
                    st.max = st.max.max(v);
                    st.mean += v;
                }
                count += 1;
            }
        }
        for st in &mut stats {
            st.mean /= count.max(1) as f64;
        }
        stats
    }

    /// Standardises every channel to zero mean and unit variance using
    /// statistics of the training split only. Returns the `(mean, std)` pairs.
    pub fn standardize(&mut self) -> Vec<(f64, f64)> {
        let c = self.channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for s in &self.train {
            for px in s.pixels.chunks_exact(c) {
                for j in 0..c {
                    sum[j] += px[j] as f64;
                    sq[j] += (px[j] as f64) * (px[j] as f64);
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let params: Vec<(f64, f64)> = (0..c)
            .map(|j| {
                let mean = sum[j] / n;
                let var = (sq[j] / n - mean * mean).max(0.0);
                let std = if var > 0.0 { libm::sqrt(var) } else { 1.0 };
                (mean, std)
            })
            .collect();
        for s in self.train.iter_mut().chain(&mut self.validation).chain(&mut self.test) {
            for px in s.pixels.chunks_exact_mut(c) {
                for (v, &(mean, std)) in px.iter_mut().zip(&params) {
                    *v = ((*v as f64 - mean) / std) as f32;
                }
            }
        }
        params
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Appends a channel of i.i.d. uniform `[0, 1)` noise to every sample.
///
/// Noise is drawn train, validation, test in order, sample by sample, in
/// raster order, from one generator seeded with `seed`.
pub fn append_noise_channel(split: &DatasetSplit, seed: u64) -> Result<DatasetSplit> {
    if split.all().next().is_none() {
        return Err(Error::Dataset("cannot append a noise channel to an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extend = |samples: &[RasterSample]| -> Vec<RasterSample> {
        samples
            .iter()
            .map(|s| {
                let c = s.channels;
                let mut pixels = Vec::with_capacity(s.height * s.width * (c + 1));
                for px in s.pixels.chunks_exact(c) {
                    pixels.extend_from_slice(px);
                    pixels.push(rng.gen::<f32>());
                }
                RasterSample { channels: c + 1, pixels, ..s.clone() }
            })
            .collect()
    };
    let train = extend(&split.train);
    let validation = extend(&split.validation);
    let test = extend(&split.test);
    let mut channel_names = split.channel_names.clone();
    channel_names.push("noise".to_string());
    Ok(DatasetSplit { train, validation, test, num_classes: split.num_classes, channel_names })
}

/// Source of 28x28 grayscale digit images grouped by digit.
#[derive(Debug, Clone, Default)]
pub struct DigitPool {
    by_digit: [Vec<Vec<u8>>; 10],
}

pub const DIGIT_SIDE: usize = 28;
pub const SYNTHETIC_SIDE: usize = 2 * DIGIT_SIDE;

impl DigitPool {
    /// `images` holds `labels.len()` consecutive 28x28 row-major images.
    pub fn from_flat(images: &[u8], labels: &[u8]) -> Result<Self> {
        let px = DIGIT_SIDE * DIGIT_SIDE;
        if images.len() != labels.len() * px {
            return Err(Error::Shape(format!(
                "{} image bytes for {} labels of 28x28 digits",
                images.len(),
                labels.len()
            )));
        }
        let mut pool = Self::default();
        for (img, &label) in images.chunks_exact(px).zip(labels) {
            if label > 9 {
                return Err(Error::Dataset(format!("digit label {label} outside 0-9")));
            }
            pool.by_digit[label as usize].push(img.to_vec());
        }
        Ok(pool)
    }

    pub fn count(&self, digit: u8) -> usize {
        self.by_digit[digit as usize].len()
    }

    pub fn image(&self, digit: u8, index: usize) -> &[u8] {
        &self.by_digit[digit as usize][index]
    }

    pub fn check_complete(&self) -> Result<()> {
        match (0..10u8).find(|&d| self.count(d) == 0) {
            Some(digit) => Err(Error::DigitPool { digit }),
            None => Ok(()),
        }
    }
}

/// Which pair of quadrants carries the even and odd digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Right,
    Left,
}

/// Metadata of one generated synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticDraw {
    pub side: Side,
    pub free_digit: u8,
    pub even_digit: u8,
    pub odd_digit: u8,
}

impl SyntheticDraw {
    /// The even digit labels right-side samples, the odd digit left-side ones.
    /// The free digit never influences the label.
    pub fn label(&self) -> usize {
        match self.side {
            Side::Right => self.even_digit as usize,
            Side::Left => self.odd_digit as usize,
        }
    }
}

pub const SYNTHETIC_CHANNELS: [&str; 3] = ["free_digit", "even_digit", "odd_digit"];

/// Scale applied to 8-bit digit pixels. Blank quadrants are exactly zero.
#[inline]
pub fn unit_pixel(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Lays out one 56x56x3 synthetic sample: the free digit in all four
/// quadrants of channel 0, the even digit in channel 1 and the odd digit in
/// channel 2, both only in the two quadrants of the selected side.
pub fn compose_synthetic(free: &[u8], even: &[u8], odd: &[u8], side: Side) -> Vec<f32> {
    assert_eq!(free.len(), DIGIT_SIDE * DIGIT_SIDE);
    assert_eq!(even.len(), DIGIT_SIDE * DIGIT_SIDE);
    assert_eq!(odd.len(), DIGIT_SIDE * DIGIT_SIDE);
    let mut pixels = vec![0.0f32; SYNTHETIC_SIDE * SYNTHETIC_SIDE * 3];
    let side_col = match side {
        Side::Right => DIGIT_SIDE,
        Side::Left => 0,
    };
    for row in 0..SYNTHETIC_SIDE {
        for col in 0..SYNTHETIC_SIDE {
            let src = (row % DIGIT_SIDE) * DIGIT_SIDE + col % DIGIT_SIDE;
            let base = (row * SYNTHETIC_SIDE + col) * 3;
            pixels[base] = unit_pixel(free[src]);
            if (side_col..side_col + DIGIT_SIDE).contains(&col) {
                pixels[base + 1] = unit_pixel(even[src]);
                pixels[base + 2] = unit_pixel(odd[src]);
            }
        }
    }
    pixels
}

/// Split sizes for `n_total` samples. Train and validation sizes are rounded,
/// the test split takes the remainder.
pub fn split_sizes(n_total: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || libm::fabs(a + b + c - 1.0) > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions ({a}, {b}, {c}) must be in [0, 1] and sum to 1"
        )));
    }
    let n_train = libm::round(n_total as f64 * a) as usize;
    let n_val = (libm::round(n_total as f64 * b) as usize).min(n_total - n_train);
    Ok((n_train, n_val, n_total - n_train - n_val))
}

/// Generates the synthetic channel-MNIST task.
///
/// Draw order from a single ChaCha8 generator seeded with `seed`: for each
/// sample id `0..n_total`, the side (`gen_range(0..2)`, 0 = right), then
/// free, even and odd digits, each as a class (`gen_range` over 10 or 5
/// choices) followed by an instance index within that class. Afterwards the
/// ids are shuffled with a Fisher-Yates pass (`j = gen_range(0..=i)` for
/// `i` descending) and assigned to train, validation and test in that order.
pub fn generate_synthetic_mnist(
    pool: &DigitPool,
    n_total: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetSplit, Vec<SyntheticDraw>)> {
    pool.check_complete()?;
    let (n_train, n_val, _) = split_sizes(n_total, fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n_total);
    let mut samples = Vec::with_capacity(n_total);
    for id in 0..n_total {
        let side = if rng.gen_range(0..2u32) == 0 { Side::Right } else { Side::Left };
        let pick = |digit: u8, rng: &mut ChaCha8Rng| -> (u8, usize) {
            (digit, rng.gen_range(0..pool.count(digit)))
        };
        let free_class = rng.gen_range(0..10u8);
        let (free_digit, free_idx) = pick(free_class, &mut rng);
        let even_class = 2 * rng.gen_range(0..5u8);
        let (even_digit, even_idx) = pick(even_class, &mut rng);
        let odd_class = 2 * rng.gen_range(0..5u8) + 1;
        let (odd_digit, odd_idx) = pick(odd_class, &mut rng);
        let draw = SyntheticDraw { side, free_digit, even_digit, odd_digit };
        let pixels = compose_synthetic(
            pool.image(free_digit, free_idx),
            pool.image(even_digit, even_idx),
            pool.image(odd_digit, odd_idx),
            side,
        );
        samples.push(RasterSample {
            id: id as u64,
            label: draw.label(),
            height: SYNTHETIC_SIDE,
            width: SYNTHETIC_SIDE,
            channels: 3,
            pixels,
        });
        draws.push(draw);
    }
    let mut order: Vec<usize> = (0..n_total).collect();
    for i in (1..n_total).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut slots: Vec<Option<RasterSample>> = samples.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<RasterSample> {
        ids.iter().map(|&i| slots[i].take().expect("each id assigned once")).collect()
    };
    let train = take(&order[..n_train]);
    let validation = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    let split = DatasetSplit {
        train,
        validation,
        test,
        num_classes: 10,
        channel_names: SYNTHETIC_CHANNELS.iter().map(|s| s.to_string()).collect(),
    };
    Ok((split, draws))
}
