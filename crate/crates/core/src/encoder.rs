//! Shared convolutional encoder: per stage convolution, leaky rectifier,
//! optional dropout and average pooling, then an adaptive average pool to
//! the embedding grid.
//!
//! Activations are stored `[image][row][col][channel]`, which lets each
//! convolution run as one im2col matrix product over the whole batch.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RasterSample;
use crate::real::{all_finite, matmul};
use crate::{Error, Real, Result};

/// Geometry of one convolution / activation / pooling stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub padding: usize,
    /// Average pool window; 1 disables pooling.
    #[serde(default = "two")]
    pub pool: usize,
    #[serde(default = "two")]
    pub pool_stride: usize,
}

fn default_kernel() -> usize {
    3
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}

impl StageConfig {
    /// 3x3 convolution, stride 1, padding 1, then a 2x2 stride-2 average pool.
    pub fn standard(out_channels: usize) -> Self {
        Self { out_channels, kernel: 3, stride: 1, padding: 1, pool: 2, pool_stride: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channels of the encoder input: 1 when every raster channel is
    /// embedded on its own, C for a joint encoder.
    #[serde(default = "one")]
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_slope")]
    pub negative_slope: f64,
    pub embedding_h: usize,
    pub embedding_w: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_slope() -> f64 {
    0.01
}
fn default_dropout() -> f64 {
    0.2
}

/// Spatial shapes flowing through one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub conv_h: usize,
    pub conv_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderPlan {
    pub input_h: usize,
    pub input_w: usize,
    pub stages: Vec<StageShape>,
    pub embedding: (usize, usize, usize),
}

impl EncoderPlan {
    fn describe(stages: &[StageShape]) -> String {
        let mut s = String::new();
        for (i, st) in stages.iter().enumerate() {
            s += &format!(
                "[stage {}: {}x{}x{} -> conv {}x{}x{} -> pool {}x{}] ",
                i + 1,
                st.in_h,
                st.in_w,
                st.in_c,
                st.conv_h,
                st.conv_w,
                st.out_c,
                st.out_h,
                st.out_w
            );
        }
        s
    }

    /// Spatial size before the final adaptive pool.
    pub fn pre_pool(&self) -> (usize, usize) {
        let last = self.stages.last().expect("plans have at least one stage");
        (last.out_h, last.out_w)
    }
}

impl EncoderConfig {
    /// Stages with the default geometry and the given output channel counts.
    pub fn standard(in_channels: usize, channels: &[usize], embedding: (usize, usize)) -> Self {
        Self {
            in_channels,
            stages: channels.iter().map(|&c| StageConfig::standard(c)).collect(),
            negative_slope: default_slope(),
            embedding_h: embedding.0,
            embedding_w: embedding.1,
            dropout: default_dropout(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// Resolves every stage's shapes for an `h x w` input, failing with the
    /// shapes reached so far when the geometry cannot produce the embedding.
    pub fn plan(&self, h: usize, w: usize) -> Result<EncoderPlan> {
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.in_channels == 0 || self.embedding_h == 0 || self.embedding_w == 0 {
            return Err(Error::Config(
                "encoder input channels and embedding size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        let mut shapes = Vec::new();
        let (mut ch, mut cw, mut cc) = (h, w, self.in_channels);
        for (i, st) in self.stages.iter().enumerate() {
            let fail = |why: String, shapes: &[StageShape]| {
                Error::Config(format!(
                    "stage {} {why}; input {h}x{w}, shapes so far: {}",
                    i + 1,
                    EncoderPlan::describe(shapes)
                ))
            };
            if st.out_channels == 0 || st.kernel == 0 || st.stride == 0 || st.pool == 0 || st.pool_stride == 0 {
                return Err(fail("has a zero-sized parameter".into(), &shapes));
            }
            let (ph, pw) = (ch + 2 * st.padding, cw + 2 * st.padding);
            if st.kernel > ph || st.kernel > pw {
                return Err(fail(
                    format!("kernel {} exceeds padded input {ph}x{pw}", st.kernel),
                    &shapes,
                ));
            }
            let conv_h = (ph - st.kernel) / st.stride + 1;
            let conv_w = (pw - st.kernel) / st.stride + 1;
            let (out_h, out_w) = if st.pool > 1 {
                if st.pool > conv_h || st.pool > conv_w {
                    return Err(fail(
                        format!("pool {} exceeds convolution output {conv_h}x{conv_w}", st.pool),
                        &shapes,
                    ));
                }
                ((conv_h - st.pool) / st.pool_stride + 1, (conv_w - st.pool) / st.pool_stride + 1)
            } else {
                (conv_h, conv_w)
            };
            shapes.push(StageShape {
                in_h: ch,
                in_w: cw,
                in_c: cc,
                conv_h,
                conv_w,
                out_c: st.out_channels,
                out_h,
                out_w,
            });
            (ch, cw, cc) = (out_h, out_w, st.out_channels);
        }
        if ch < self.embedding_h || cw < self.embedding_w {
            return Err(Error::Config(format!(
                "target embedding {}x{} is larger than the final stage output {ch}x{cw}; shapes: {}",
                self.embedding_h,
                self.embedding_w,
                EncoderPlan::describe(&shapes)
            )));
        }
        Ok(EncoderPlan {
            input_h: h,
            input_w: w,
            stages: shapes,
            embedding: (self.embedding_h, self.embedding_w, cc),
        })
    }
}

/// Convolution kernels (`[k*k*in_c] x [out_c]`, row index `(ky*k + kx)*in_c +
/// ci`) and biases of every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub kernels: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> EncoderParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            kernels: self.kernels.iter().map(|k| vec![T::zero(); k.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        EncoderParams {
            kernels: self.kernels.iter().map(conv).collect(),
            biases: self.biases.iter().map(conv).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    /// Parameter tensors in a fixed order: stage by stage, kernel then bias.
    pub fn slices(&self) -> Vec<&[T]> {
        self.kernels
            .iter()
            .zip(&self.biases)
            .flat_map(|(k, b)| [k.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.kernels
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(k, b)| [k.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    fn matches(&self, config: &EncoderConfig) -> bool {
        let mut cin = config.in_channels;
        self.kernels.len() == config.stages.len()
            && self.biases.len() == config.stages.len()
            && config.stages.iter().enumerate().all(|(i, st)| {
                let ok = self.kernels[i].len() == st.kernel * st.kernel * cin * st.out_channels
                    && self.biases[i].len() == st.out_channels;
                cin = st.out_channels;
                ok
            })
    }
}

/// Fan-in scaled uniform (Kaiming) initialisation for leaky rectifiers,
/// zero biases. Kernels are drawn stage by stage in storage order.
pub fn init_encoder<T: Real>(config: &EncoderConfig, seed: u64) -> EncoderParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cin = config.in_channels;
    let mut kernels = Vec::new();
    let mut biases = Vec::new();
    let slope = config.negative_slope;
    for st in &config.stages {
        let fan_in = (st.kernel * st.kernel * cin) as f64;
        let bound = libm::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
        let n = st.kernel * st.kernel * cin * st.out_channels;
        kernels.push((0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect());
        biases.push(vec![T::zero(); st.out_channels]);
        cin = st.out_channels;
    }
    EncoderParams { kernels, biases }
}

/// Encoder bound to an input geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub plan: EncoderPlan,
    pub params: EncoderParams<T>,
}

/// Per-channel latent grid `h x w x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid<T> {
    pub values: Vec<T>,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub channel: usize,
    pub sample_id: u64,
}

impl<T: Real> EmbeddingGrid<T> {
    #[inline]
    pub fn patch(&self, row: usize, col: usize) -> &[T] {
        &self.values[(row * self.w + col) * self.d..][..self.d]
    }
}

/// Cached intermediates of one training forward pass.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    n: usize,
    stages: Vec<StageCache<T>>,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    cols: Vec<T>,
    pre: Vec<T>,
    mask: Option<Vec<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, input_h: usize, input_w: usize, seed: u64) -> Result<Self> {
        let plan = config.plan(input_h, input_w)?;
        let params = init_encoder(&config, seed);
        Ok(Self { config, plan, params })
    }

    pub fn with_params(
        config: EncoderConfig,
        input_h: usize,
        input_w: usize,
        params: EncoderParams<T>,
    ) -> Result<Self> {
        let plan = config.plan(input_h, input_w)?;
        if !params.matches(&config) {
            return Err(Error::Architecture(
                "encoder parameter shapes do not match the configuration".into(),
            ));
        }
        if !params.slices().iter().all(|s| all_finite(s)) {
            return Err(Error::Numeric { stage: "encoder parameters".into() });
        }
        Ok(Self { config, plan, params })
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder { config: self.config.clone(), plan: self.plan.clone(), params: self.params.cast() }
    }

    pub fn embedding_shape(&self) -> (usize, usize, usize) {
        self.plan.embedding
    }

    pub fn input_len(&self) -> usize {
        self.plan.input_h * self.plan.input_w * self.config.in_channels
    }

    pub fn embedding_len(&self) -> usize {
        let (h, w, d) = self.plan.embedding;
        h * w * d
    }

    /// Inference pass over `n` images laid out back to back.
    pub fn encode_batch(&self, input: &[T], n: usize) -> Result<Vec<T>> {
        if input.len() != n * self.input_len() {
            return self.run(input, n, None, false).map(|(out, _)| out);
        }
        // Small blocks keep the column matrices cache resident.
        const BLOCK: usize = 8;
        let mut out = Vec::with_capacity(n * self.embedding_len());
        for (b, block) in input.chunks(BLOCK * self.input_len()).enumerate() {
            let m = BLOCK.min(n - b * BLOCK);
            out.extend(self.run(block, m, None, false)?.0);
        }
        Ok(out)
    }

    /// Training pass; dropout is applied after every activation when a
    /// generator is supplied.
    pub fn forward_train(
        &self,
        input: &[T],
        n: usize,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<T>, Activations<T>)> {
        let (out, act) = self.run(input, n, dropout, true)?;
        Ok((out, act.expect("cache requested")))
    }

    /// Embeds one `h x w` (x `in_channels`) image.
    pub fn encode(&self, image: &[T], dropout: Option<&mut ChaCha8Rng>) -> Result<EmbeddingGrid<T>> {
        let (values, _) = self.run(image, 1, dropout, false)?;
        let (h, w, d) = self.plan.embedding;
        Ok(EmbeddingGrid { values, h, w, d, channel: 0, sample_id: 0 })
    }

    /// Embeds every channel of a raster sample with the same parameters.
    pub fn encode_all_channels(&self, sample: &RasterSample) -> Result<Vec<EmbeddingGrid<T>>> {
        if self.config.in_channels != 1 {
            return Err(Error::Architecture("per-channel encoding needs a single-channel encoder".into()));
        }
        if (sample.height, sample.width) != (self.plan.input_h, self.plan.input_w) {
            return Err(Error::Shape(format!(
                "sample {} is {}x{}, encoder expects {}x{}",
                sample.id, sample.height, sample.width, self.plan.input_h, self.plan.input_w
            )));
        }
        (0..sample.channels)
            .map(|j| {
                let img: Vec<T> =
                    sample.channel(j).into_iter().map(|v| T::from_f64_lossy(v as f64)).collect();
                let mut grid = self.encode(&img, None)?;
                grid.channel = j;
                grid.sample_id = sample.id;
                Ok(grid)
            })
            .collect()
    }

    fn run(
        &self,
        input: &[T],
        n: usize,
        mut dropout: Option<&mut ChaCha8Rng>,
        keep: bool,
    ) -> Result<(Vec<T>, Option<Activations<T>>)> {
        if input.len() != n * self.input_len() {
            return Err(Error::Shape(format!(
                "encoder input holds {} values, expected {} images of {}",
                input.len(),
                n,
                self.input_len()
            )));
        }
        let slope = T::from_f64_lossy(self.config.negative_slope);
        let keep_prob = 1.0 - self.config.dropout;
        let mut caches = Vec::new();
        let mut x: Vec<T> = input.to_vec();
        for (i, (st, shape)) in self.config.stages.iter().zip(&self.plan.stages).enumerate() {
            let kk = st.kernel * st.kernel * shape.in_c;
            let rows = n * shape.conv_h * shape.conv_w;
            let mut pre = vec![T::zero(); rows * shape.out_c];
            let bias = &self.params.biases[i];
            for row in pre.chunks_exact_mut(shape.out_c) {
                row.copy_from_slice(bias);
            }
            let mut cols = vec![T::zero(); rows * kk];
            im2col(&x, n, shape, st, &mut cols);
            matmul(rows, kk, shape.out_c, &cols, false, &self.params.kernels[i], false, &mut pre, true);
            if !all_finite(&pre) {
                return Err(Error::Numeric { stage: format!("encoder stage {} convolution", i + 1) });
            }
            let mut act: Vec<T> = pre.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
            let mask = match dropout.as_deref_mut() {
                Some(rng) if self.config.dropout > 0.0 => {
                    let scale = T::from_f64_lossy(1.0 / keep_prob);
                    let mask: Vec<T> = (0..act.len())
                        .map(|_| if rng.gen::<f64>() < keep_prob { scale } else { T::zero() })
                        .collect();
                    for (a, &m) in act.iter_mut().zip(&mask) {
                        *a = *a * m;
                    }
                    Some(mask)
                }
                _ => None,
            };
            x = if st.pool > 1 { avg_pool(&act, n, shape, st) } else { act };
            if keep {
                caches.push(StageCache { cols, pre, mask });
            }
        }
        let (ph, pw) = self.plan.pre_pool();
        let (eh, ew, d) = self.plan.embedding;
        let out = adaptive_avg_pool(&x, n, ph, pw, d, eh, ew);
        Ok((out, keep.then_some(Activations { n, stages: caches })))
    }

    /// Back-propagates `grad_out` (shaped like the embedding batch) through a
    /// cached forward pass. Returns parameter gradients and, on request, the
    /// gradient with respect to the input.
    pub fn backward(
        &self,
        act: &Activations<T>,
        grad_out: &[T],
        want_input: bool,
    ) -> (EncoderParams<T>, Option<Vec<T>>) {
        let n = act.n;
        let (ph, pw) = self.plan.pre_pool();
        let (eh, ew, d) = self.plan.embedding;
        assert_eq!(grad_out.len(), n * eh * ew * d, "gradient does not match the embedding batch");
        let mut grads = self.params.zeros_like();
        let mut g = adaptive_avg_pool_backward(grad_out, n, ph, pw, d, eh, ew);
        let slope = T::from_f64_lossy(self.config.negative_slope);
        for i in (0..self.config.stages.len()).rev() {
            let st = &self.config.stages[i];
            let shape = &self.plan.stages[i];
            let cache = &act.stages[i];
            let mut g_act = if st.pool > 1 { avg_pool_backward(&g, n, shape, st) } else { g };
            if let Some(mask) = &cache.mask {
                for (v, &m) in g_act.iter_mut().zip(mask) {
                    *v = *v * m;
                }
            }
            for (v, &p) in g_act.iter_mut().zip(&cache.pre) {
                if p <= T::zero() {
                    *v = *v * slope;
                }
            }
            let kk = st.kernel * st.kernel * shape.in_c;
            let rows = n * shape.conv_h * shape.conv_w;
            matmul(kk, rows, shape.out_c, &cache.cols, true, &g_act, false, &mut grads.kernels[i], true);
            let db = &mut grads.biases[i];
            for row in g_act.chunks_exact(shape.out_c) {
                for (b, &v) in db.iter_mut().zip(row) {
                    *b = *b + v;
                }
            }
            if i == 0 && !want_input {
                return (grads, None);
            }
            let mut dcols = vec![T::zero(); rows * kk];
            matmul(rows, shape.out_c, kk, &g_act, false, &self.params.kernels[i], true, &mut dcols, false);
            g = col2im(&dcols, n, shape, st);
        }
        (grads, Some(g))
    }
}

fn im2col<T: Real>(x: &[T], n: usize, shape: &StageShape, st: &StageConfig, cols: &mut [T]) {
    let (h, w, c) = (shape.in_h as isize, shape.in_w as isize, shape.in_c);
    let k = st.kernel;
    let kk = k * k * c;
    let span = k * c;
    let img_len = shape.in_h * shape.in_w * c;
    let mut row = 0;
    for img in 0..n {
        let base = &x[img * img_len..][..img_len];
        for oy in 0..shape.conv_h {
            for ox in 0..shape.conv_w {
                let dst = &mut cols[row * kk..][..kk];
                let ix0 = (ox * st.stride) as isize - st.padding as isize;
                let inside = ix0 >= 0 && ix0 + k as isize <= w;
                for ky in 0..k {
                    let iy = (oy * st.stride + ky) as isize - st.padding as isize;
                    let run = &mut dst[ky * span..][..span];
                    if iy < 0 || iy >= h {
                        run.fill(T::zero());
                    } else if inside {
                        let src = ((iy * w + ix0) as usize) * c;
                        run.copy_from_slice(&base[src..src + span]);
                    } else {
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            let cell = &mut run[kx * c..][..c];
                            if ix >= 0 && ix < w {
                                let src = ((iy * w + ix) as usize) * c;
                                cell.copy_from_slice(&base[src..src + c]);
                            } else {
                                cell.fill(T::zero());
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], n: usize, shape: &StageShape, st: &StageConfig) -> Vec<T> {
    let (h, w, c) = (shape.in_h as isize, shape.in_w as isize, shape.in_c);
    let k = st.kernel;
    let kk = k * k * c;
    let img_len = shape.in_h * shape.in_w * c;
    let mut out = vec![T::zero(); n * img_len];
    let mut row = 0;
    for img in 0..n {
        let base = &mut out[img * img_len..][..img_len];
        for oy in 0..shape.conv_h {
            for ox in 0..shape.conv_w {
                let src = &cols[row * kk..][..kk];
                for ky in 0..k {
                    let iy = (oy * st.stride + ky) as isize - st.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * st.stride + kx) as isize - st.padding as isize;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let dst = ((iy * w + ix) as usize) * c;
                        for (o, &v) in base[dst..dst + c].iter_mut().zip(&src[(ky * k + kx) * c..][..c]) {
                            *o = *o + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn avg_pool<T: Real>(x: &[T], n: usize, shape: &StageShape, st: &StageConfig) -> Vec<T> {
    let (ih, iw, c) = (shape.conv_h, shape.conv_w, shape.out_c);
    let (oh, ow) = (shape.out_h, shape.out_w);
    let scale = T::one() / T::from_usize(st.pool * st.pool).expect("small integer");
    let mut out = vec![T::zero(); n * oh * ow * c];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[((img * oh + oy) * ow + ox) * c..][..c];
                for py in 0..st.pool {
                    for px in 0..st.pool {
                        let (iy, ix) = (oy * st.pool_stride + py, ox * st.pool_stride + px);
                        let src = &x[((img * ih + iy) * iw + ix) * c..][..c];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
                for o in dst.iter_mut() {
                    *o = *o * scale;
                }
            }
        }
    }
    out
}

fn avg_pool_backward<T: Real>(g: &[T], n: usize, shape: &StageShape, st: &StageConfig) -> Vec<T> {
    let (ih, iw, c) = (shape.conv_h, shape.conv_w, shape.out_c);
    let (oh, ow) = (shape.out_h, shape.out_w);
    let scale = T::one() / T::from_usize(st.pool * st.pool).expect("small integer");
    let mut out = vec![T::zero(); n * ih * iw * c];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &g[((img * oh + oy) * ow + ox) * c..][..c];
                for py in 0..st.pool {
                    for px in 0..st.pool {
                        let (iy, ix) = (oy * st.pool_stride + py, ox * st.pool_stride + px);
                        let dst = &mut out[((img * ih + iy) * iw + ix) * c..][..c];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v * scale;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bin `[floor(i*len/out), ceil((i+1)*len/out))` of an adaptive pool.
#[inline]
pub fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

fn adaptive_avg_pool<T: Real>(x: &[T], n: usize, ih: usize, iw: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * oh * ow * c];
    for img in 0..n {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, ih, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, iw, ow);
                let scale = T::one() / T::from_usize((y1 - y0) * (x1 - x0)).expect("small integer");
                let dst = &mut out[((img * oh + oy) * ow + ox) * c..][..c];
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let src = &x[((img * ih + iy) * iw + ix) * c..][..c];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
                for o in dst.iter_mut() {
                    *o = *o * scale;
                }
            }
        }
    }
    out
}

fn adaptive_avg_pool_backward<T: Real>(
    g: &[T],
    n: usize,
    ih: usize,
    iw: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * ih * iw * c];
    for img in 0..n {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, ih, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, iw, ow);
                let scale = T::one() / T::from_usize((y1 - y0) * (x1 - x0)).expect("small integer");
                let src = &g[((img * oh + oy) * ow + ox) * c..][..c];
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let dst = &mut out[((img * ih + iy) * iw + ix) * c..][..c];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v * scale;
                        }
                    }
                }
            }
        }
    }
    out
}
