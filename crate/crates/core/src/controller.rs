//! Motion controller: temporal smoothing of a coefficient window, a
//! five-layer MLP emitting per-layer basis magnitudes, and projection onto
//! an orthogonal codebook, giving a motion code in W+.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Graph, Real, Tensor, Var};
use crate::generator::LatentCodePlus;
use crate::nn::{normal_tensor, BoundLinear, Linear, Params};
use crate::{Error, Result};

pub const CONTROLLER_SLOPE: f64 = 0.2;
pub const TEMPORAL_LAYERS: usize = 3;
pub const MLP_LAYERS: usize = 5;
/// Codebooks whose largest off-diagonal |dot| exceeds this are re-orthogonalized.
pub const ORTHO_TOLERANCE: f64 = 1e-6;
const RANK_FLOOR: f64 = 1e-8;

/// A centered window of per-frame coefficients, stored `[frames, dims]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSignal<R: Real = f32> {
    coefficients: Tensor<R>,
    expression_dims: usize,
}

impl<R: Real> MotionSignal<R> {
    pub fn new(coefficients: Tensor<R>, expression_dims: usize) -> Result<Self> {
        let s = coefficients.shape();
        if s.len() != 2 || s[0] % 2 == 0 || expression_dims > s[1] {
            return Err(Error::Shape(format!(
                "motion window must be [odd frames, dims >= {expression_dims}], got {s:?}"
            )));
        }
        Ok(Self { coefficients, expression_dims })
    }

    /// Window of `2 * radius + 1` frames centered on `center`, repeating the
    /// first/last frame past the ends of the sequence.
    pub fn from_sequence(frames: &[Vec<f64>], center: usize, radius: usize, expression_dims: usize) -> Result<Self> {
        if frames.is_empty() || center >= frames.len() {
            return Err(Error::InvalidArgument(format!("frame {center} outside a sequence of {}", frames.len())));
        }
        let dims = frames[0].len();
        if frames.iter().any(|f| f.len() != dims) {
            return Err(Error::Format("motion frames have differing widths".into()));
        }
        let mut data = Vec::with_capacity((2 * radius + 1) * dims);
        for off in 0..=2 * radius {
            let idx = (center + off).saturating_sub(radius).min(frames.len() - 1);
            data.extend(frames[idx].iter().map(|&v| R::of(v)));
        }
        Self::new(Tensor::new(&[2 * radius + 1, dims], data)?, expression_dims)
    }

    pub fn window(&self) -> usize {
        self.coefficients.shape()[0]
    }

    pub fn dims(&self) -> usize {
        self.coefficients.shape()[1]
    }

    pub fn expression_dims(&self) -> usize {
        self.expression_dims
    }

    pub fn pose_dims(&self) -> usize {
        self.dims() - self.expression_dims
    }

    pub fn tensor(&self) -> &Tensor<R> {
        &self.coefficients
    }
}

/// Reads a motion file: one frame per line, whitespace-separated values.
/// Blank lines and `#` comments are skipped.
pub fn load_motion_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    parse_motion_text(&std::fs::read_to_string(path)?)
}

pub fn parse_motion_text(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let frame = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| Error::Format(format!("motion line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = frames.first().map(Vec::len) {
            if frame.len() != first {
                return Err(Error::Format(format!("motion line {} has {} values, expected {first}", i + 1, frame.len())));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn format_motion_text(frames: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for f in frames {
        let line: Vec<String> = f.iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// `K` learnable basis vectors of dimension `d`, kept mutually orthogonal.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<R: Real = f32> {
    pub bases: Tensor<R>,
}

impl<R: Real> Codebook<R> {
    pub fn size(&self) -> usize {
        self.bases.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.bases.shape()[1]
    }

    /// Largest `|<b_i, b_j>|` over `i != j`.
    pub fn max_off_diagonal(&self) -> f64 {
        let (k, d) = (self.size(), self.dim());
        let b = self.bases.data();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in i + 1..k {
                let dot: f64 = (0..d).map(|c| b[i * d + c].f64() * b[j * d + c].f64()).sum();
                worst = worst.max(dot.abs());
            }
        }
        worst
    }

    /// Gram-Schmidt in index order. Each basis becomes its residual against
    /// the earlier ones (not renormalized).
    pub fn orthogonalize(&mut self) -> Result<()> {
        let (k, d) = (self.size(), self.dim());
        if k > d {
            return Err(Error::InvalidArgument(format!("{k} bases cannot be orthogonal in {d} dimensions")));
        }
        let mut done: Vec<Vec<f64>> = Vec::with_capacity(k);
        for i in 0..k {
            let mut v: Vec<f64> = self.bases.row(i).iter().map(|x| x.f64()).collect();
            // Two passes keep the residual orthogonal to working precision.
            for _ in 0..2 {
                for u in &done {
                    let uu: f64 = u.iter().map(|x| x * x).sum();
                    let coef = v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / uu;
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= coef * b);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < RANK_FLOOR {
                return Err(Error::InvalidArgument(format!("codebook is rank deficient at basis {i} (residual {n:e})")));
            }
            done.push(v);
        }
        self.bases = Tensor::new(&[k, d], done.into_iter().flatten().map(R::of).collect())?;
        Ok(())
    }

    /// Re-orthogonalizes only when the tolerance is exceeded, so an already
    /// orthogonal codebook is left bit-identical.
    pub fn maintain(&mut self) -> Result<bool> {
        if self.max_off_diagonal() > ORTHO_TOLERANCE {
            self.orthogonalize()?;
            return Ok(true);
        }
        Ok(false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    pub coeff_dims: usize,
    pub expression_dims: usize,
    pub window: usize,
    pub latent_dim: usize,
    pub layers: usize,
    pub codebook_size: usize,
    pub mlp_width: usize,
}

impl ControllerConfig {
    pub fn temporal_channels(&self) -> usize {
        2 * self.coeff_dims
    }
}

/// 1-D temporal conv layer: kernel 3, stride 2, zero padding 1.
#[derive(Clone, Debug)]
pub struct TemporalConv<R: Real = f32> {
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
}

pub const TEMPORAL_KERNEL: usize = 3;
pub const TEMPORAL_STRIDE: usize = 2;
pub const TEMPORAL_PAD: usize = 1;

#[derive(Clone, Debug)]
pub struct ControllerNet<R: Real = f32> {
    pub config: ControllerConfig,
    pub temporal: Vec<TemporalConv<R>>,
    pub mlp: Vec<Linear<R>>,
    pub codebook: Codebook<R>,
    /// Leaky slope between temporal layers (1.0 makes the stack linear).
    pub temporal_slope: f64,
}

pub struct BoundController {
    pub temporal: Vec<(Var, Var)>,
    pub mlp: Vec<BoundLinear>,
    pub codebook: Var,
}

impl BoundController {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for (k, b) in &self.temporal {
            v.extend([*k, *b]);
        }
        for l in &self.mlp {
            v.extend(l.vars());
        }
        v.push(self.codebook);
        v
    }

    /// Inverse of [`BoundController::vars`].
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        let want = 2 * (TEMPORAL_LAYERS + MLP_LAYERS) + 1;
        if vars.len() != want {
            return Err(Error::Shape(format!("controller binds {want} vars, got {}", vars.len())));
        }
        let t = 2 * TEMPORAL_LAYERS;
        Ok(Self {
            temporal: vars[..t].chunks_exact(2).map(|p| (p[0], p[1])).collect(),
            mlp: vars[t..want - 1].chunks_exact(2).map(|p| BoundLinear { weight: p[0], bias: p[1] }).collect(),
            codebook: vars[want - 1],
        })
    }
}

impl<R: Real> ControllerNet<R> {
    pub fn init(config: ControllerConfig, seed: u64) -> Result<Self> {
        if config.window % 2 == 0 || config.expression_dims > config.coeff_dims {
            return Err(Error::Config(format!(
                "controller needs an odd window and expression dims <= coefficient dims, got {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tc = config.temporal_channels();
        let temporal = (0..TEMPORAL_LAYERS)
            .map(|i| {
                let cin = if i == 0 { config.coeff_dims } else { tc };
                TemporalConv {
                    kernel: normal_tensor(&[TEMPORAL_KERNEL, cin, tc], (2.0 / (TEMPORAL_KERNEL * cin) as f64).sqrt(), &mut rng),
                    bias: Tensor::zeros(&[tc]),
                }
            })
            .collect();
        let out = config.codebook_size * (config.layers + 1);
        let mut dims = vec![tc];
        dims.extend([config.mlp_width; MLP_LAYERS - 1]);
        dims.push(out);
        let mut mlp: Vec<Linear<R>> = dims.windows(2).map(|w| Linear::init(w[0], w[1], &mut rng)).collect();
        let last = mlp.last_mut().expect("five layers");
        last.weight = normal_tensor(last.weight.shape(), 0.1 / (config.mlp_width as f64).sqrt(), &mut rng);
        let d = config.latent_dim;
        let mut codebook = Codebook { bases: normal_tensor(&[config.codebook_size, d], 1.0 / (d as f64).sqrt(), &mut rng) };
        codebook.orthogonalize()?;
        Ok(Self { config, temporal, mlp, codebook, temporal_slope: CONTROLLER_SLOPE })
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> BoundController {
        BoundController {
            temporal: self
                .temporal
                .iter()
                .map(|t| (g.leaf(t.kernel.clone(), trainable), g.leaf(t.bias.clone(), trainable)))
                .collect(),
            mlp: self.mlp.iter().map(|l| l.bind(g, trainable)).collect(),
            codebook: g.leaf(self.codebook.bases.clone(), trainable),
        }
    }

    /// Window `[frames, dims]` -> smoothed feature `[2 * dims]`.
    pub fn temporal_smooth(&self, g: &mut Graph<R>, bound: &BoundController, x: Var) -> Result<Var> {
        let want = [self.config.window, self.config.coeff_dims];
        if g.shape(x) != want {
            return Err(Error::Shape(format!("motion window must be {want:?}, got {:?}", g.shape(x))));
        }
        let mut h = x;
        for (k, b) in &bound.temporal {
            h = g.conv1d(h, *k, *b, TEMPORAL_STRIDE, TEMPORAL_PAD)?;
            h = g.leaky_relu(h, self.temporal_slope);
        }
        g.mean_rows(h)
    }

    /// Raw MLP output `[K, L + 1]` for a `[C]` feature.
    pub fn raw_magnitudes(&self, g: &mut Graph<R>, bound: &BoundController, feature: Var) -> Result<Var> {
        let c = g.shape(feature).iter().product();
        let mut h = g.reshape(feature, &[1, c])?;
        for (i, layer) in bound.mlp.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < bound.mlp.len() {
                h = g.leaky_relu(h, CONTROLLER_SLOPE);
            }
        }
        g.reshape(h, &[self.config.codebook_size, self.config.layers + 1])
    }

    /// Full controller: window -> motion code `[L, d]`.
    pub fn forward(&self, g: &mut Graph<R>, bound: &BoundController, x: Var) -> Result<Var> {
        let feature = self.temporal_smooth(g, bound, x)?;
        let raw = self.raw_magnitudes(g, bound, feature)?;
        let mags = compute_magnitudes(g, raw)?;
        project_onto_codebook(g, mags, bound.codebook)
    }

    pub fn motion_code(&self, signal: &MotionSignal<R>) -> Result<LatentCodePlus<R>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(signal.tensor().clone());
        let code = self.forward(&mut g, &bound, x)?;
        LatentCodePlus::new(g.value(code).clone())
    }
}

/// `[K, L + 1]` -> `[K, L]`: the last column is added to every other column.
pub fn compute_magnitudes<R: Real>(g: &mut Graph<R>, raw: Var) -> Result<Var> {
    let s = g.shape(raw).to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::Shape(format!("raw magnitudes must be [K, L + 1], got {s:?}")));
    }
    let l = s[1] - 1;
    // [I_L; 1^T] maps [a_1..a_L, b] to [a_1 + b, .., a_L + b].
    let fold = Tensor::from_fn(&[l + 1, l], |i| {
        let (r, c) = (i / l, i % l);
        if r == c || r == l {
            R::one()
        } else {
            R::zero()
        }
    });
    let fold = g.constant(fold);
    g.matmul(raw, fold)
}

/// Row `l` of the code is `sum_k mags[k, l] * bases[k]`.
pub fn project_onto_codebook<R: Real>(g: &mut Graph<R>, mags: Var, bases: Var) -> Result<Var> {
    let mt = g.transpose(mags)?;
    g.matmul(mt, bases)
}

impl<R: Real> Params<R> for ControllerNet<R> {
    fn named_params(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out = Vec::new();
        for (i, t) in self.temporal.iter().enumerate() {
            out.push((format!("temporal{i}.kernel"), &t.kernel));
            out.push((format!("temporal{i}.bias"), &t.bias));
        }
        for (i, l) in self.mlp.iter().enumerate() {
            l.push_named(&format!("mlp{i}"), &mut out);
        }
        out.push(("codebook".to_string(), &self.codebook.bases));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = Vec::new();
        for t in &mut self.temporal {
            out.push(&mut t.kernel);
            out.push(&mut t.bias);
        }
        for l in &mut self.mlp {
            l.push_mut(&mut out);
        }
        out.push(&mut self.codebook.bases);
        out
    }
}
