//! Latent-modulated tri-plane generator and the W / W+ latent spaces.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::write_atomic;
use crate::engine::{Graph, Real, Tensor, Var};
use crate::nn::{normal_tensor, BoundLinear, Linear, Params};
use crate::triplane::TriPlaneVolume;
use crate::{Error, Result};

pub const GENERATOR_SLOPE: f64 = 0.2;
const SEED_SIZE: usize = 4;

/// A code in W: one `d`-dimensional vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<R: Real = f32>(pub Tensor<R>);

/// A code in W+: `L` rows of dimension `d`, one per modulated stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodePlus<R: Real = f32>(pub Tensor<R>);

impl<R: Real> LatentCode<R> {
    pub fn new(values: Vec<R>) -> Self {
        let d = values.len();
        Self(Tensor::new(&[d], values).expect("rank-1 latent"))
    }

    pub fn zeros(d: usize) -> Self {
        Self(Tensor::zeros(&[d]))
    }

    pub fn dim(&self) -> usize {
        self.0.numel()
    }

    pub fn values(&self) -> &[R] {
        self.0.data()
    }

    /// Repeats the code into every W+ row.
    pub fn extend_to_wplus(&self, layers: usize) -> LatentCodePlus<R> {
        let d = self.dim();
        let mut data = Vec::with_capacity(layers * d);
        for _ in 0..layers {
            data.extend_from_slice(self.values());
        }
        LatentCodePlus(Tensor::new(&[layers, d], data).expect("wplus shape"))
    }
}

impl<R: Real> LatentCodePlus<R> {
    pub fn new(rows: Tensor<R>) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::Shape(format!("W+ code must be [L, d], got {:?}", rows.shape())));
        }
        Ok(Self(rows))
    }

    pub fn layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, l: usize) -> &[R] {
        self.0.row(l)
    }

    pub fn tensor(&self) -> &Tensor<R> {
        &self.0
    }

    /// One row per line, shortest round-trip decimal formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in 0..self.layers() {
            let row: Vec<String> = self.row(l).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<R>> = Vec::new();
        for (i, line) in text.lines().map(str::trim).enumerate().filter(|(_, l)| !l.is_empty() && !l.starts_with('#')) {
            let row = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map(R::of).map_err(|e| Error::Format(format!("latent line {}: {e}", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            if rows.first().is_some_and(|r| r.len() != row.len()) {
                return Err(Error::Format(format!("latent line {} has {} values, expected {}", i + 1, row.len(), rows[0].len())));
            }
            rows.push(row);
        }
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Format("empty latent file".into()));
        }
        let (l, d) = (rows.len(), rows[0].len());
        Self::new(Tensor::new(&[l, d], rows.concat())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Convex blend `alpha * a + (1 - alpha) * b` of two identity codes.
pub fn interpolate_identity<R: Real>(a: &LatentCodePlus<R>, b: &LatentCodePlus<R>, alpha: f64) -> Result<LatentCodePlus<R>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (wa, wb) = (R::of(alpha), R::of(1.0 - alpha));
    LatentCodePlus::new(a.0.zip_map(&b.0, |x, y| wa * x + wb * y)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub channels: usize,
    pub resolution: usize,
    pub plane_channels: usize,
    pub extent: f64,
}

impl GeneratorConfig {
    /// Stage indices that upsample (the first `log2(P / 4)` stages).
    pub fn upsample_stages(&self) -> Result<usize> {
        let p = self.resolution;
        if p < SEED_SIZE || !(p / SEED_SIZE).is_power_of_two() || p % SEED_SIZE != 0 {
            return Err(Error::Config(format!("plane resolution must be 4 * 2^k, got {p}")));
        }
        let ups = (p / SEED_SIZE).trailing_zeros() as usize;
        if ups > self.layers {
            return Err(Error::Config(format!("{} stages cannot reach resolution {p}", self.layers)));
        }
        Ok(ups)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorStage<R: Real = f32> {
    pub upsample: bool,
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
    /// Per-channel scale `1 + A w` (bias initialized to one).
    pub scale: Linear<R>,
    /// Per-channel shift `B w`.
    pub shift: Linear<R>,
}

/// Learned constant seed followed by `L` (upsample?) + 3x3 conv stages,
/// each modulated channel-wise by its own W+ row, then a 1x1 projection to
/// `3 * C` channels split into the three planes.
#[derive(Clone, Debug)]
pub struct GeneratorNet<R: Real = f32> {
    pub config: GeneratorConfig,
    pub seed: Tensor<R>,
    pub stages: Vec<GeneratorStage<R>>,
    pub output: Linear<R>,
}

pub struct BoundGenerator {
    seed: Var,
    stages: Vec<(Var, Var, BoundLinear, BoundLinear)>,
    output: BoundLinear,
}

impl BoundGenerator {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.seed];
        for (k, b, s, h) in &self.stages {
            v.extend([*k, *b]);
            v.extend(s.vars());
            v.extend(h.vars());
        }
        v.extend(self.output.vars());
        v
    }

    /// Inverse of [`BoundGenerator::vars`] for a net with `layers` stages.
    pub fn from_vars(layers: usize, vars: &[Var]) -> Result<Self> {
        if vars.len() != 6 * layers + 3 {
            return Err(Error::Shape(format!("generator with {layers} stages binds {} vars, got {}", 6 * layers + 3, vars.len())));
        }
        let lin = |i: usize| BoundLinear { weight: vars[i], bias: vars[i + 1] };
        Ok(Self {
            seed: vars[0],
            stages: (0..layers).map(|l| 1 + 6 * l).map(|i| (vars[i], vars[i + 1], lin(i + 2), lin(i + 4))).collect(),
            output: lin(1 + 6 * layers),
        })
    }
}

impl<R: Real> GeneratorNet<R> {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let ups = config.upsample_stages()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let d = config.latent_dim;
        let stages = (0..config.layers)
            .map(|l| {
                let mut scale = Linear::init(d, c, &mut rng);
                scale.weight = normal_tensor(&[d, c], 0.2 / (d as f64).sqrt(), &mut rng);
                scale.bias = Tensor::full(&[c], R::one());
                let mut shift = Linear::init(d, c, &mut rng);
                shift.weight = normal_tensor(&[d, c], 0.5 / (d as f64).sqrt(), &mut rng);
                GeneratorStage {
                    upsample: l < ups,
                    kernel: normal_tensor(&[3, 3, c, c], (2.0 / (9 * c) as f64).sqrt(), &mut rng),
                    bias: Tensor::zeros(&[c]),
                    scale,
                    shift,
                }
            })
            .collect();
        let mut output = Linear::init(c, 3 * config.plane_channels, &mut rng);
        output.weight = normal_tensor(&[c, 3 * config.plane_channels], (1.0 / c as f64).sqrt(), &mut rng);
        Ok(Self { seed: normal_tensor(&[SEED_SIZE, SEED_SIZE, c], 1.0, &mut rng), stages, output, config })
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            seed: g.leaf(self.seed.clone(), trainable),
            stages: self
                .stages
                .iter()
                .map(|s| {
                    (
                        g.leaf(s.kernel.clone(), trainable),
                        g.leaf(s.bias.clone(), trainable),
                        s.scale.bind(g, trainable),
                        s.shift.bind(g, trainable),
                    )
                })
                .collect(),
            output: self.output.bind(g, trainable),
        }
    }

    /// Differentiable forward: `wp[L, d]` -> features `[P, P, 3, C]`.
    pub fn forward(&self, g: &mut Graph<R>, bound: &BoundGenerator, wp: Var) -> Result<Var> {
        let cfg = &self.config;
        if g.shape(wp) != [cfg.layers, cfg.latent_dim] {
            return Err(Error::Shape(format!(
                "generator expects W+ code [{}, {}], got {:?}",
                cfg.layers,
                cfg.latent_dim,
                g.shape(wp)
            )));
        }
        let mut x = bound.seed;
        for (l, (stage, (kernel, bias, scale, shift))) in self.stages.iter().zip(&bound.stages).enumerate() {
            if stage.upsample {
                x = g.upsample2x(x)?;
            }
            x = g.conv2d(x, *kernel, *bias)?;
            let row = g.select_row(wp, l)?;
            let row = g.reshape(row, &[1, cfg.latent_dim])?;
            let s = scale.forward(g, row)?;
            let s = g.reshape(s, &[cfg.channels])?;
            let h = shift.forward(g, row)?;
            let h = g.reshape(h, &[cfg.channels])?;
            x = g.mul_row(x, s)?;
            x = g.add_row(x, h)?;
            x = g.leaky_relu(x, GENERATOR_SLOPE);
        }
        let p = cfg.resolution;
        let flat = g.reshape(x, &[p * p, cfg.channels])?;
        let planes = bound.output.forward(g, flat)?;
        g.reshape(planes, &[p, p, 3, cfg.plane_channels])
    }

    /// Forward-only tri-plane generation.
    pub fn generate_triplane(&self, wp: &LatentCodePlus<R>) -> Result<TriPlaneVolume<R>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let w = g.constant(wp.0.clone());
        let f = self.forward(&mut g, &bound, w)?;
        TriPlaneVolume::new(g.value(f).clone(), self.config.extent)
    }

    /// Mean of `n_samples` standard-normal latent draws.
    pub fn average_latent(&self, n_samples: usize, seed: u64) -> Result<LatentCode<R>> {
        average_latent(self.config.latent_dim, n_samples, seed)
    }
}

pub fn average_latent<R: Real>(dim: usize, n_samples: usize, seed: u64) -> Result<LatentCode<R>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("average_latent needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; dim];
    for _ in 0..n_samples {
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a += z;
        }
    }
    Ok(LatentCode::new(acc.into_iter().map(|a| R::of(a / n_samples as f64)).collect()))
}

impl<R: Real> Params<R> for GeneratorNet<R> {
    fn named_params(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out = vec![("seed".to_string(), &self.seed)];
        for (l, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{l}.kernel"), &s.kernel));
            out.push((format!("stage{l}.bias"), &s.bias));
            s.scale.push_named(&format!("stage{l}.scale"), &mut out);
            s.shift.push_named(&format!("stage{l}.shift"), &mut out);
        }
        self.output.push_named("output", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = vec![&mut self.seed];
        for s in &mut self.stages {
            out.push(&mut s.kernel);
            out.push(&mut s.bias);
            s.scale.push_mut(&mut out);
            s.shift.push_mut(&mut out);
        }
        self.output.push_mut(&mut out);
        out
    }
}
