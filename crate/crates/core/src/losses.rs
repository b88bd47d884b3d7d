//! Animation loss: multi-scale feature L1, Gram-matrix style, eye/mouth
//! region L1 and embedding cosine terms, plus tri-plane and motion-code
//! regularizers. The feature and embedding networks are fixed random
//! extractors rather than pretrained models.

use std::ops::AddAssign;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{BackwardCtx, Graph, Real, Tensor, Var};
use crate::nn::normal_tensor;
use crate::triplane::{triplane_sample, BoundDecoder, FeatureDecoder};
use crate::{Error, Result};

pub const EMBEDDING_INPUT: usize = 16;
pub const EMBEDDING_DIM: usize = 64;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub style: f64,
    pub region: f64,
    pub identity: f64,
    pub tv: f64,
    pub regularizer: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { perceptual: 1.0, style: 250.0, region: 1.0, identity: 1.0, tv: 0.1, regularizer: 0.01 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { perceptual: 0.0, style: 0.0, region: 0.0, identity: 0.0, tv: 0.0, regularizer: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.perceptual, self.style, self.region, self.identity, self.tv, self.regularizer];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// What the L1 regularizer is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerTarget {
    #[default]
    MotionCode,
    ControllerParams,
}

/// Axis-aligned box in pixel-edge coordinates (`x` = column).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RegionBox {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.x1 > self.x0 && self.y1 > self.y0) {
            return Err(Error::InvalidArgument(format!("degenerate region box {self:?}")));
        }
        if self.x0 < 0.0 || self.y0 < 0.0 || self.x1 > width as f64 || self.y1 > height as f64 {
            return Err(Error::InvalidArgument(format!("region box {self:?} outside {width}x{height} image")));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x0..=self.x1).contains(&p[0]) && (self.y0..=self.y1).contains(&p[1])
    }
}

/// Fixed pyramid: each level blurs and halves the previous level's image,
/// then applies a random 3x3 conv bank.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<R: Real = f32> {
    levels: usize,
    blur: Tensor<R>,
    bank: Tensor<R>,
}

impl<R: Real> FeatureExtractor<R> {
    pub fn new(levels: usize, filters: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_bank(levels, normal_tensor(&[3, 3, 3, filters], (1.0 / 27.0f64).sqrt(), &mut rng))
    }

    pub fn with_bank(levels: usize, bank: Tensor<R>) -> Self {
        let taps = [1.0, 2.0, 1.0];
        let blur = Tensor::from_fn(&[3, 3, 3, 3], |i| {
            let (ky, kx, ci, co) = (i / 27, (i / 9) % 3, (i / 3) % 3, i % 3);
            if ci == co {
                R::of(taps[ky] * taps[kx] / 16.0)
            } else {
                R::zero()
            }
        });
        Self { levels, blur, bank }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn filters(&self) -> usize {
        self.bank.shape()[3]
    }

    /// Feature maps `[h_j, w_j, F]`, one per level.
    pub fn pyramid(&self, g: &mut Graph<R>, image: Var) -> Result<Vec<Var>> {
        let blur = g.constant(self.blur.clone());
        let bank = g.constant(self.bank.clone());
        let zero3 = g.constant(Tensor::zeros(&[3]));
        let zero_f = g.constant(Tensor::zeros(&[self.filters()]));
        let mut x = image;
        let mut out = Vec::with_capacity(self.levels);
        for _ in 0..self.levels {
            x = g.conv2d(x, blur, zero3)?;
            x = g.avg_pool2x(x)?;
            out.push(g.conv2d(x, bank, zero_f)?);
        }
        Ok(out)
    }
}

/// Fixed projection of a 16x16 grayscale thumbnail to a unit 64-d vector.
#[derive(Clone, Debug)]
pub struct EmbeddingExtractor<R: Real = f32> {
    projection: Tensor<R>,
}

impl<R: Real> EmbeddingExtractor<R> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = EMBEDDING_INPUT * EMBEDDING_INPUT;
        Self { projection: normal_tensor(&[n, EMBEDDING_DIM], (1.0 / n as f64).sqrt(), &mut rng) }
    }

    /// `[H, W, 3]` -> unit embedding `[1, 64]`.
    pub fn embed(&self, g: &mut Graph<R>, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("embedding expects [H, W, 3], got {s:?}")));
        }
        let (h, w) = (s[0], s[1]);
        let flat = g.reshape(image, &[h * w, 3])?;
        let luma = g.constant(Tensor::from_f64(&[3, 1], &LUMA)?);
        let gray = g.matmul(flat, luma)?;
        let gray = g.reshape(gray, &[h, w, 1])?;
        let coords = resize_coords(EMBEDDING_INPUT, h, w);
        let coords = g.constant(coords);
        let small = g.grid_sample(gray, coords)?;
        let small = g.reshape(small, &[1, EMBEDDING_INPUT * EMBEDDING_INPUT])?;
        let proj = g.constant(self.projection.clone());
        let e = g.matmul(small, proj)?;
        g.l2_normalize(e, 1e-12)
    }
}

/// Pixel-centre sample grid resizing an `h x w` image to `size x size`.
fn resize_coords<R: Real>(size: usize, h: usize, w: usize) -> Tensor<R> {
    Tensor::from_fn(&[size * size, 2], |i| {
        let (cell, axis) = (i / 2, i % 2);
        let (idx, extent) = if axis == 0 { (cell % size, w) } else { (cell / size, h) };
        R::of((idx as f64 + 0.5) * extent as f64 / size as f64 - 0.5)
    })
}

fn check_pair<R: Real>(g: &Graph<R>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("image shapes differ: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1<R: Real>(g: &mut Graph<R>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn sum_all<R: Real>(g: &mut Graph<R>, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let mut acc = *it.next().ok_or_else(|| Error::InvalidArgument("empty loss sum".into()))?;
    for &t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn perceptual_from<R: Real>(g: &mut Graph<R>, fa: &[Var], fb: &[Var]) -> Result<Var> {
    let terms = fa.iter().zip(fb).map(|(&a, &b)| l1(g, a, b)).collect::<Result<Vec<_>>>()?;
    sum_all(g, &terms)
}

fn style_from<R: Real>(g: &mut Graph<R>, fa: &[Var], fb: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(fa.len());
    for (&a, &b) in fa.iter().zip(fb) {
        let ga = gram_matrix(g, a)?;
        let gb = gram_matrix(g, b)?;
        terms.push(l1(g, ga, gb)?);
    }
    sum_all(g, &terms)
}

pub fn perceptual_loss<R: Real>(g: &mut Graph<R>, fx: &FeatureExtractor<R>, a: Var, b: Var) -> Result<Var> {
    check_pair(g, a, b)?;
    let (fa, fb) = (fx.pyramid(g, a)?, fx.pyramid(g, b)?);
    perceptual_from(g, &fa, &fb)
}

pub fn style_loss<R: Real>(g: &mut Graph<R>, fx: &FeatureExtractor<R>, a: Var, b: Var) -> Result<Var> {
    check_pair(g, a, b)?;
    let (fa, fb) = (fx.pyramid(g, a)?, fx.pyramid(g, b)?);
    style_from(g, &fa, &fb)
}

/// `F^T F / (h w F)` for features `[h, w, F]` (or `[n, F]`).
pub fn gram_matrix<R: Real>(g: &mut Graph<R>, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let f = *s.last().ok_or_else(|| Error::Shape("gram of a scalar".into()))?;
    let n: usize = s[..s.len() - 1].iter().product();
    let flat = g.reshape(features, &[n, f])?;
    let t = g.transpose(flat)?;
    let gram = g.matmul(t, flat)?;
    Ok(g.scale(gram, 1.0 / (n * f) as f64))
}

/// Bilinear crop of `box` resized to `patch x patch` pixels, `[patch^2, 3]`.
pub fn crop_resize<R: Real>(g: &mut Graph<R>, image: Var, region: &RegionBox, patch: usize) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("crop expects [H, W, C], got {s:?}")));
    }
    region.validate(s[0], s[1])?;
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let coords = Tensor::from_fn(&[patch * patch, 2], |i| {
        let (cell, axis) = (i / 2, i % 2);
        let (idx, lo, hi) = if axis == 0 { (cell % patch, region.x0, region.x1) } else { (cell / patch, region.y0, region.y1) };
        R::of(lo + (idx as f64 + 0.5) / patch as f64 * (hi - lo) - 0.5)
    });
    let coords = g.constant(coords);
    g.grid_sample(image, coords)
}

pub fn region_loss<R: Real>(g: &mut Graph<R>, a: Var, b: Var, regions: &[RegionBox], patch: usize) -> Result<Var> {
    check_pair(g, a, b)?;
    if regions.is_empty() {
        return Ok(g.constant(Tensor::scalar(R::zero())));
    }
    let mut terms = Vec::with_capacity(regions.len());
    for r in regions {
        let ca = crop_resize(g, a, r, patch)?;
        let cb = crop_resize(g, b, r, patch)?;
        terms.push(l1(g, ca, cb)?);
    }
    sum_all(g, &terms)
}

/// `1 - cos` between unit embeddings.
pub fn cosine_distance<R: Real>(g: &mut Graph<R>, ea: Var, eb: Var) -> Result<Var> {
    let prod = g.mul(ea, eb)?;
    let dot = g.sum(prod);
    let neg = g.scale(dot, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

pub fn identity_loss<R: Real>(g: &mut Graph<R>, ex: &EmbeddingExtractor<R>, a: Var, b: Var) -> Result<Var> {
    check_pair(g, a, b)?;
    let ea = ex.embed(g, a)?;
    let eb = ex.embed(g, b)?;
    cosine_distance(g, ea, eb)
}

/// Mean `|difference|` over all horizontal and vertical neighbour pairs of
/// planes stored `[P, P, K, C]`.
pub fn total_variation<R: Real>(g: &mut Graph<R>, planes: Var) -> Result<Var> {
    let s = g.shape(planes).to_vec();
    if s.len() != 4 || s[0] < 2 || s[1] < 2 {
        return Err(Error::Shape(format!("total variation expects [P, P, K, C], got {s:?}")));
    }
    let (rows, cols, inner) = (s[0], s[1], s[2] * s[3]);
    let count = (rows * (cols - 1) + (rows - 1) * cols) * inner;
    let inv = 1.0 / count as f64;
    let x = g.value(planes).data();
    let mut acc = 0.0f64;
    for_each_tv_pair(rows, cols, inner, |a, b| acc += (x[b] - x[a]).f64().abs());
    let value = Tensor::scalar(R::of(acc * inv));
    Ok(g.record(
        "total_variation",
        &[planes],
        value,
        Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Result<Vec<Option<Tensor<R>>>> {
            let x = c.inputs[0].data();
            let scale = c.grad.item() * R::of(inv);
            let mut grad = Tensor::zeros(c.inputs[0].shape());
            let gd = grad.data_mut();
            for_each_tv_pair(rows, cols, inner, |a, b| {
                let d = x[b] - x[a];
                let sgn = if d > R::zero() {
                    scale
                } else if d < R::zero() {
                    -scale
                } else {
                    R::zero()
                };
                gd[b] += sgn;
                gd[a] -= sgn;
            });
            Ok(vec![Some(grad)])
        })),
    ))
}

fn for_each_tv_pair(rows: usize, cols: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for r in 0..rows {
        for col in 0..cols {
            let base = (r * cols + col) * inner;
            for k in 0..inner {
                if col + 1 < cols {
                    f(base + k, base + inner + k);
                }
                if r + 1 < rows {
                    f(base + k, base + cols * inner + k);
                }
            }
        }
    }
}

/// Mean `|sigma(p) - sigma(p + eps u)|` at seeded random points and unit
/// directions, `eps = extent / P`.
#[allow(clippy::too_many_arguments)]
pub fn density_smoothness<R: Real>(
    g: &mut Graph<R>,
    features: Var,
    extent: f64,
    decoder: &FeatureDecoder<R>,
    bound: &BoundDecoder,
    samples: usize,
    seed: u64,
) -> Result<Var> {
    let p = g.shape(features)[0];
    let eps = extent / p as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(samples * 6);
    let mut shifted = Vec::with_capacity(samples * 3);
    for _ in 0..samples {
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(-extent..extent));
        let u = loop {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 && n <= 1.0 {
                break v.map(|x| x / n);
            }
        };
        pts.extend(base.map(R::of));
        shifted.extend((0..3).map(|k| R::of(base[k] + eps * u[k])));
    }
    pts.extend(shifted);
    let pts = g.constant(Tensor::new(&[2 * samples, 3], pts)?);
    let feats = triplane_sample(g, features, pts, extent)?;
    let (_, sigma) = decoder.forward(g, bound, feats)?;
    let sigma = g.reshape(sigma, &[2, samples])?;
    let a = g.select_row(sigma, 0)?;
    let b = g.select_row(sigma, 1)?;
    l1(g, a, b)
}

/// Mean absolute value of the motion code.
pub fn motion_code_regularizer<R: Real>(g: &mut Graph<R>, code: Var) -> Var {
    let a = g.abs(code);
    g.mean(a)
}

/// Mean absolute value over a set of parameter tensors.
pub fn parameter_regularizer<R: Real>(g: &mut Graph<R>, params: &[Var]) -> Result<Var> {
    let count: usize = params.iter().map(|&v| g.value(v).numel()).sum();
    let sums = params
        .iter()
        .map(|&v| {
            let a = g.abs(v);
            g.sum(a)
        })
        .collect::<Vec<_>>();
    let total = sum_all(g, &sums)?;
    Ok(g.scale(total, 1.0 / count.max(1) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub levels: usize,
    pub filters: usize,
    pub patch: usize,
    pub smoothness_samples: usize,
    pub extractor_seed: u64,
    pub regularizer_target: RegularizerTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            levels: 3,
            filters: 8,
            patch: 8,
            smoothness_samples: 128,
            extractor_seed: 7,
            regularizer_target: RegularizerTarget::MotionCode,
        }
    }
}

/// Per-term values (unweighted) and the weighted total, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub perceptual: f64,
    pub style: f64,
    pub region: f64,
    pub identity: f64,
    pub tv: f64,
    pub smoothness: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        self.perceptual += o.perceptual;
        self.style += o.style;
        self.region += o.region;
        self.identity += o.identity;
        self.tv += o.tv;
        self.smoothness += o.smoothness;
        self.regularizer += o.regularizer;
        self.total += o.total;
    }
}

impl LossTerms {
    pub fn scaled(mut self, k: f64) -> Self {
        for v in [
            &mut self.perceptual,
            &mut self.style,
            &mut self.region,
            &mut self.identity,
            &mut self.tv,
            &mut self.smoothness,
            &mut self.regularizer,
            &mut self.total,
        ] {
            *v *= k;
        }
        self
    }
}

/// Loss term handles on a graph; absent terms contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct TermVars {
    pub perceptual: Option<Var>,
    pub style: Option<Var>,
    pub region: Option<Var>,
    pub identity: Option<Var>,
    pub tv: Option<Var>,
    pub smoothness: Option<Var>,
    pub regularizer: Option<Var>,
}

/// The full weighted animation loss with its frozen extractors.
#[derive(Clone, Debug)]
pub struct AnimationLoss<R: Real = f32> {
    pub config: LossConfig,
    pub features: FeatureExtractor<R>,
    pub embedding: EmbeddingExtractor<R>,
}

impl<R: Real> AnimationLoss<R> {
    pub fn new(config: LossConfig) -> Result<Self> {
        config.weights.validate()?;
        let features = FeatureExtractor::new(config.levels, config.filters, config.extractor_seed);
        let embedding = EmbeddingExtractor::new(config.extractor_seed.wrapping_add(1));
        Ok(Self { config, features, embedding })
    }

    /// The four image-comparison terms of `target` against `rendered`.
    pub fn image_terms(&self, g: &mut Graph<R>, target: Var, rendered: Var, regions: &[RegionBox]) -> Result<TermVars> {
        check_pair(g, target, rendered)?;
        let ft = self.features.pyramid(g, target)?;
        let fr = self.features.pyramid(g, rendered)?;
        Ok(TermVars {
            perceptual: Some(perceptual_from(g, &ft, &fr)?),
            style: Some(style_from(g, &ft, &fr)?),
            region: Some(region_loss(g, target, rendered, regions, self.config.patch)?),
            identity: Some(identity_loss(g, &self.embedding, target, rendered)?),
            ..TermVars::default()
        })
    }

    /// Weighted sum of the present terms. The tri-plane weight covers both
    /// TV and density smoothness.
    pub fn combine(&self, g: &mut Graph<R>, terms: &TermVars) -> Result<(Var, LossTerms)> {
        let w = &self.config.weights;
        let entries = [
            (terms.perceptual, w.perceptual),
            (terms.style, w.style),
            (terms.region, w.region),
            (terms.identity, w.identity),
            (terms.tv, w.tv),
            (terms.smoothness, w.tv),
            (terms.regularizer, w.regularizer),
        ];
        let value = |v: Option<Var>, g: &Graph<R>| v.map_or(0.0, |v| g.value(v).item().f64());
        let mut log = LossTerms {
            perceptual: value(terms.perceptual, g),
            style: value(terms.style, g),
            region: value(terms.region, g),
            identity: value(terms.identity, g),
            tv: value(terms.tv, g),
            smoothness: value(terms.smoothness, g),
            regularizer: value(terms.regularizer, g),
            total: 0.0,
        };
        let mut weighted = Vec::new();
        for (v, k) in entries {
            if let Some(v) = v {
                weighted.push(g.scale(v, k));
            }
        }
        let total = if weighted.is_empty() { g.constant(Tensor::scalar(R::zero())) } else { sum_all(g, &weighted)? };
        log.total = g.value(total).item().f64();
        Ok((total, log))
    }
}
