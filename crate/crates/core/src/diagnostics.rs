//! Gradient-check suite: every differentiable op on randomized inputs,
//! then the composed pieces (a 4x4 render, the controller, the losses on
//! 8x8 images). Inputs are drawn away from kinks so that piecewise-linear
//! ops are checked where they are differentiable.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::controller::{BoundController, ControllerNet};
use crate::engine::gradcheck::{check_gradients_against, GradCheckConfig, GradCheckReport};
use crate::engine::{BackwardCtx, Graph, Real, Tensor, Var};
use crate::generator::{BoundGenerator, GeneratorNet};
use crate::losses::{
    density_smoothness, identity_loss, l1, motion_code_regularizer, parameter_regularizer, perceptual_loss, region_loss,
    style_loss, total_variation, AnimationLoss, EmbeddingExtractor, FeatureExtractor, LossConfig, RegionBox,
};
use crate::nn::Params;
use crate::renderer::{composite, render_graph, Camera, RenderConfig};
use crate::triplane::{triplane_sample, BoundDecoder, FeatureDecoder};
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    /// Random trials per elementary op.
    pub trials: usize,
    /// Random trials per composed check (render, controller, losses).
    pub composite_trials: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { trials: 100, composite_trials: 2, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub precision: &'static str,
    pub tolerance: f64,
    pub checks: Vec<GradCheckReport>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&GradCheckReport> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// One line per check, then a summary line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<24} rel_err={:.3e} coords={}\n",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.rel_error,
                c.coords_checked
            ));
        }
        out.push_str(&format!(
            "{}: {} checks, {} failed, max rel_err {:.3e} (tol {:.0e}), {:.1}s\n",
            self.precision,
            self.checks.len(),
            self.failures().len(),
            self.max_rel_error(),
            self.tolerance,
            self.elapsed.as_secs_f64()
        ));
        out
    }
}

type Build<R> = Box<dyn Fn(&mut Graph<R>, &[Var]) -> Result<Var>>;

fn precision_name<R: Real>() -> &'static str {
    if is_f32::<R>() {
        "f32"
    } else {
        "f64"
    }
}

fn is_f32<R: Real>() -> bool {
    std::mem::size_of::<R>() == 4
}

/// Runs `trials` independent checks and keeps the worst error. For f32 the
/// f64 build of the same case (same random draws) supplies the finite
/// differences.
fn repeated<R: Real>(
    name: &str,
    trials: usize,
    seed: u64,
    base: &GradCheckConfig,
    make: &dyn Fn(&mut ChaCha8Rng) -> Result<(Vec<Tensor<R>>, Build<R>)>,
    reference: Option<&dyn Fn(&mut ChaCha8Rng) -> Result<(Vec<Tensor<f64>>, Build<f64>)>>,
) -> Result<GradCheckReport> {
    let mut worst = GradCheckReport { name: name.to_string(), rel_error: 0.0, coords_checked: 0, passed: true };
    for t in 0..trials.max(1) {
        let trial_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let (inputs, f) = make(&mut rng)?;
        let rf = reference.map(|m| m(&mut ChaCha8Rng::seed_from_u64(trial_seed))).transpose()?.map(|(_, rf)| rf);
        let cfg = GradCheckConfig { seed: trial_seed, ..*base };
        let r = check_gradients_against(name, &inputs, &*f, rf.as_deref(), &cfg)?;
        worst.rel_error = worst.rel_error.max(r.rel_error);
        worst.coords_checked += r.coords_checked;
        worst.passed &= r.passed;
    }
    Ok(worst)
}

fn uniform<R: Real>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<R> {
    Tensor::from_fn(shape, |_| R::of(rng.random_range(lo..hi)))
}

/// Magnitudes in `[0.2, 1]` with random sign.
fn away_from_zero<R: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<R> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        R::of(if rng.random::<bool>() { m } else { -m })
    })
}

/// Shuffled distinct values at least 0.09 apart, so no two entries tie.
fn spaced<R: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..n).collect();
    levels.shuffle(rng);
    let offset = n as f64 * 0.05;
    let v: Vec<f64> = levels.into_iter().map(|k| k as f64 * 0.1 - offset + rng.random_range(0.0..0.01)).collect();
    Tensor::from_f64(shape, &v).expect("shape matches")
}

/// Texel-space coordinates with fractional part in `[0.15, 0.85]`.
fn interior_coord(rng: &mut impl Rng, size: usize) -> f64 {
    rng.random_range(0..size - 1) as f64 + rng.random_range(0.15..0.85)
}

type Maker<R> = Box<dyn Fn(&mut ChaCha8Rng) -> Result<(Vec<Tensor<R>>, Build<R>)>>;

fn op_cases<R: Real>() -> Vec<(&'static str, Maker<R>)> {
    fn case<R: Real>(
        name: &'static str,
        make: impl Fn(&mut ChaCha8Rng) -> Result<(Vec<Tensor<R>>, Build<R>)> + 'static,
    ) -> (&'static str, Maker<R>) {
        (name, Box::new(make))
    }
    let m = [3usize, 4];
    vec![
        case("exp", move |r| Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.exp(v[0])))))),
        case("sqrt", move |r| Ok((vec![uniform(r, &m, 0.3, 2.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.sqrt(v[0])))))),
        case("abs", move |r| Ok((vec![away_from_zero(r, &m)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.abs(v[0])))))),
        case("square", move |r| Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.square(v[0])))))),
        case("leaky_relu", move |r| {
            Ok((vec![away_from_zero(r, &m)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.leaky_relu(v[0], 0.2)))))
        }),
        case("softplus", move |r| Ok((vec![uniform(r, &m, -3.0, 3.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.softplus(v[0])))))),
        case("sigmoid", move |r| Ok((vec![uniform(r, &m, -3.0, 3.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.sigmoid(v[0])))))),
        case("scale", move |r| Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.scale(v[0], 1.7)))))),
        case("add_scalar", move |r| {
            Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.add_scalar(v[0], 0.3)))))
        }),
        case("add", move |r| {
            Ok((vec![uniform(r, &m, -1.0, 1.0), uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.add(v[0], v[1]))))
        }),
        case("sub", move |r| {
            Ok((vec![uniform(r, &m, -1.0, 1.0), uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.sub(v[0], v[1]))))
        }),
        case("mul", move |r| {
            Ok((vec![uniform(r, &m, -1.0, 1.0), uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.mul(v[0], v[1]))))
        }),
        case("div", move |r| {
            Ok((vec![uniform(r, &m, -1.0, 1.0), away_from_zero(r, &m)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.div(v[0], v[1]))))
        }),
        case("add_row", move |r| {
            Ok((vec![uniform(r, &m, -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.add_row(v[0], v[1]))))
        }),
        case("mul_row", move |r| {
            Ok((vec![uniform(r, &m, -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.mul_row(v[0], v[1]))))
        }),
        case("matmul", move |r| {
            Ok((
                vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
                Box::new(|g: &mut Graph<R>, v: &[Var]| g.matmul(v[0], v[1])),
            ))
        }),
        case("linear", move |r| {
            Ok((
                vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
                Box::new(|g: &mut Graph<R>, v: &[Var]| g.linear(v[0], v[1], v[2])),
            ))
        }),
        case("transpose", move |r| Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.transpose(v[0]))))),
        case("reshape", move |r| {
            Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.reshape(v[0], &[2, 6]))))
        }),
        case("sum", move |r| Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.sum(v[0])))))),
        case("mean", move |r| Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(g.mean(v[0])))))),
        case("mean_rows", move |r| Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.mean_rows(v[0]))))),
        case("repeat_rows", move |r| {
            Ok((vec![uniform(r, &[4], -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.repeat_rows(v[0], 3))))
        }),
        case("select_row", move |r| {
            Ok((vec![uniform(r, &m, -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.select_row(v[0], 1))))
        }),
        case("l2_normalize", move |r| {
            Ok((vec![away_from_zero(r, &[2, 5])], Box::new(|g: &mut Graph<R>, v: &[Var]| g.l2_normalize(v[0], 1e-12))))
        }),
        case("conv1d", move |r| {
            Ok((
                vec![uniform(r, &[5, 2], -1.0, 1.0), uniform(r, &[3, 2, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
                Box::new(|g: &mut Graph<R>, v: &[Var]| g.conv1d(v[0], v[1], v[2], 2, 1)),
            ))
        }),
        case("conv2d", move |r| {
            Ok((
                vec![uniform(r, &[4, 3, 2], -1.0, 1.0), uniform(r, &[3, 3, 2, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
                Box::new(|g: &mut Graph<R>, v: &[Var]| g.conv2d(v[0], v[1], v[2])),
            ))
        }),
        case("upsample2x", move |r| {
            Ok((vec![uniform(r, &[2, 3, 2], -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.upsample2x(v[0]))))
        }),
        case("avg_pool2x", move |r| {
            Ok((vec![uniform(r, &[4, 2, 2], -1.0, 1.0)], Box::new(|g: &mut Graph<R>, v: &[Var]| g.avg_pool2x(v[0]))))
        }),
        case("grid_sample", move |r| {
            let (h, w) = (3, 4);
            let coords: Vec<f64> = (0..5).flat_map(|_| [interior_coord(r, w), interior_coord(r, h)]).collect();
            Ok((
                vec![uniform(r, &[h, w, 2], -1.0, 1.0), Tensor::from_f64(&[5, 2], &coords)?],
                Box::new(|g: &mut Graph<R>, v: &[Var]| g.grid_sample(v[0], v[1])),
            ))
        }),
        case("triplane_sample", move |r| {
            let (p, extent) = (3, 1.0);
            let pts: Vec<f64> =
                (0..12).map(|_| (interior_coord(r, p) / (p - 1) as f64 * 2.0 - 1.0) * extent).collect();
            Ok((
                vec![uniform(r, &[p, p, 3, 2], -1.0, 1.0), Tensor::from_f64(&[4, 3], &pts)?],
                Box::new(move |g: &mut Graph<R>, v: &[Var]| triplane_sample(g, v[0], v[1], extent)),
            ))
        }),
        case("composite", move |r| {
            let deltas: Vec<f64> = (0..8).map(|_| r.random_range(0.1..0.5)).collect();
            Ok((
                vec![uniform(r, &[8, 3], 0.05, 0.95), uniform(r, &[8, 1], 0.1, 3.0)],
                Box::new(move |g: &mut Graph<R>, v: &[Var]| composite(g, v[0], v[1], &deltas, 4, [0.2, 0.5, 0.9])),
            ))
        }),
        case("total_variation", move |r| {
            Ok((vec![spaced(r, &[3, 3, 3, 2])], Box::new(|g: &mut Graph<R>, v: &[Var]| total_variation(g, v[0]))))
        }),
    ]
}

/// Desk-shaped but tiny model used by the composed checks.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        layers: 3,
        codebook: 3,
        resolution: 8,
        plane_channels: 3,
        generator_channels: 4,
        decoder_hidden: 6,
        mlp_width: 8,
        expression_dims: 2,
        pose_dims: 2,
        window: 5,
        extent: 1.0,
        average_samples: 8,
    }
}

fn composite_cases<R: Real>() -> Vec<(&'static str, Maker<R>)> {
    let mc = gradcheck_model_config();
    let mut out: Vec<(&'static str, Maker<R>)> = Vec::new();

    let cfg = mc.clone();
    out.push((
        "render_4x4",
        Box::new(move |r| {
            let gen = GeneratorNet::<R>::init(cfg.generator(), r.random())?;
            let decoder = FeatureDecoder::<R>::init(cfg.plane_channels, cfg.decoder_hidden, r);
            let mut inputs = vec![uniform(r, &[cfg.layers, cfg.latent_dim], -1.0, 1.0)];
            inputs.extend(gen.snapshot());
            inputs.extend(decoder.snapshot());
            let ng = gen.params().len();
            let cam = Camera::orbit([0.0; 3], 2.5, r.random_range(-0.5..0.5), r.random_range(-0.3..0.3), 0.7, 4, 1.3, 3.7);
            let rc = RenderConfig { samples_per_ray: 6, background: [0.3, 0.6, 0.9], ..RenderConfig::default() };
            let layers = cfg.layers;
            let extent = cfg.extent;
            Ok((
                inputs,
                Box::new(move |g: &mut Graph<R>, v: &[Var]| {
                    let bg = BoundGenerator::from_vars(layers, &v[1..1 + ng])?;
                    let bd = BoundDecoder::from_vars(&v[1 + ng..])?;
                    let planes = gen.forward(g, &bg, v[0])?;
                    render_graph(g, planes, extent, &decoder, &bd, &cam, &rc)
                }) as Build<R>,
            ))
        }),
    ));

    let cfg = mc.clone();
    out.push((
        "controller",
        Box::new(move |r| {
            let net = ControllerNet::<R>::init(cfg.controller(), r.random())?;
            let mut inputs = vec![uniform(r, &[cfg.window, cfg.expression_dims + cfg.pose_dims], -1.0, 1.0)];
            inputs.extend(net.snapshot());
            Ok((
                inputs,
                Box::new(move |g: &mut Graph<R>, v: &[Var]| {
                    let bound = BoundController::from_vars(&v[1..])?;
                    net.forward(g, &bound, v[0])
                }) as Build<R>,
            ))
        }),
    ));

    fn pair<R: Real>(r: &mut ChaCha8Rng) -> Vec<Tensor<R>> {
        vec![uniform(r, &[8, 8, 3], 0.0, 1.0), uniform(r, &[8, 8, 3], 0.0, 1.0)]
    }
    out.push((
        "l1",
        Box::new(|r| Ok((pair(r), Box::new(|g: &mut Graph<R>, v: &[Var]| l1(g, v[0], v[1])) as Build<R>))),
    ));
    out.push((
        "perceptual_loss",
        Box::new(|r| {
            let fx = FeatureExtractor::<R>::new(3, 4, r.random());
            Ok((pair(r), Box::new(move |g: &mut Graph<R>, v: &[Var]| perceptual_loss(g, &fx, v[0], v[1])) as Build<R>))
        }),
    ));
    out.push((
        "style_loss",
        Box::new(|r| {
            let fx = FeatureExtractor::<R>::new(3, 4, r.random());
            Ok((pair(r), Box::new(move |g: &mut Graph<R>, v: &[Var]| style_loss(g, &fx, v[0], v[1])) as Build<R>))
        }),
    ));
    out.push((
        "region_loss",
        Box::new(|r| {
            let boxes = [RegionBox { x0: 1.0, y0: 4.5, x1: 6.5, y1: 7.5 }, RegionBox { x0: 0.5, y0: 1.0, x1: 7.0, y1: 3.5 }];
            Ok((pair(r), Box::new(move |g: &mut Graph<R>, v: &[Var]| region_loss(g, v[0], v[1], &boxes, 4)) as Build<R>))
        }),
    ));
    out.push((
        "identity_loss",
        Box::new(|r| {
            let ex = EmbeddingExtractor::<R>::new(r.random());
            Ok((pair(r), Box::new(move |g: &mut Graph<R>, v: &[Var]| identity_loss(g, &ex, v[0], v[1])) as Build<R>))
        }),
    ));
    let cfg = mc.clone();
    out.push((
        "density_smoothness",
        Box::new(move |r| {
            let decoder = FeatureDecoder::<R>::init(cfg.plane_channels, cfg.decoder_hidden, r);
            let mut inputs = vec![uniform(r, &[4, 4, 3, cfg.plane_channels], -1.0, 1.0)];
            inputs.extend(decoder.snapshot());
            let seed = r.random();
            Ok((
                inputs,
                Box::new(move |g: &mut Graph<R>, v: &[Var]| {
                    let bd = BoundDecoder::from_vars(&v[1..])?;
                    density_smoothness(g, v[0], 1.0, &decoder, &bd, 16, seed)
                }) as Build<R>,
            ))
        }),
    ));
    out.push((
        "motion_code_regularizer",
        Box::new(|r| {
            Ok((vec![away_from_zero(r, &[3, 4])], Box::new(|g: &mut Graph<R>, v: &[Var]| Ok(motion_code_regularizer(g, v[0]))) as Build<R>))
        }),
    ));
    out.push((
        "parameter_regularizer",
        Box::new(|r| {
            Ok((
                vec![away_from_zero(r, &[3, 4]), away_from_zero(r, &[5])],
                Box::new(|g: &mut Graph<R>, v: &[Var]| parameter_regularizer(g, v)) as Build<R>,
            ))
        }),
    ));
    out.push((
        "weighted_total_loss",
        Box::new(|r| {
            let loss = AnimationLoss::<R>::new(LossConfig { levels: 2, filters: 4, patch: 4, extractor_seed: r.random(), ..LossConfig::default() })?;
            let boxes = [RegionBox { x0: 2.0, y0: 4.0, x1: 6.0, y1: 7.0 }];
            let mut inputs = pair(r);
            inputs.push(spaced(r, &[3, 3, 3, 2]));
            inputs.push(away_from_zero(r, &[3, 4]));
            Ok((
                inputs,
                Box::new(move |g: &mut Graph<R>, v: &[Var]| {
                    let mut terms = loss.image_terms(g, v[0], v[1], &boxes)?;
                    terms.tv = Some(total_variation(g, v[2])?);
                    terms.regularizer = Some(motion_code_regularizer(g, v[3]));
                    Ok(loss.combine(g, &terms)?.0)
                }) as Build<R>,
            ))
        }),
    ));
    out
}

/// Runs every op-level and composed check at the precision's tolerance.
pub fn run_suite<R: Real>(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    // With differences taken in f64 the f64 step is usable, which keeps the
    // leaky-relu stacks of the composed checks off their kinks.
    let base = GradCheckConfig { step: GradCheckConfig::for_type::<f64>().step, ..GradCheckConfig::for_type::<R>() };
    let mut checks = Vec::new();
    fn reference<R: Real>(m: &Maker<f64>) -> Option<&dyn Fn(&mut ChaCha8Rng) -> Result<(Vec<Tensor<f64>>, Build<f64>)>> {
        is_f32::<R>().then_some(&**m)
    }
    for (i, ((name, make), (_, make64))) in op_cases::<R>().into_iter().zip(op_cases::<f64>()).enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64 * 1000);
        checks.push(repeated(name, cfg.trials, seed, &base, &*make, reference::<R>(&make64))?);
    }
    for (i, ((name, make), (_, make64))) in composite_cases::<R>().into_iter().zip(composite_cases::<f64>()).enumerate() {
        let seed = cfg.seed.wrapping_add(1_000_000 + i as u64 * 1000);
        checks.push(repeated(name, cfg.composite_trials, seed, &base, &*make, reference::<R>(&make64))?);
    }
    Ok(SuiteReport { precision: precision_name::<R>(), tolerance: base.rel_tol, checks, elapsed: start.elapsed() })
}

/// A square op whose backward drops the factor 2. The checker must flag it.
pub fn corrupted_check<R: Real>(seed: u64) -> Result<GradCheckReport> {
    let make = |r: &mut ChaCha8Rng| -> Result<(Vec<Tensor<R>>, Build<R>)> {
        Ok((
            vec![uniform(r, &[3, 4], -1.0, 1.0)],
            Box::new(|g: &mut Graph<R>, v: &[Var]| {
                let value = g.value(v[0]).map(|x| x * x);
                let backward = |c: &BackwardCtx<'_, R>| -> Result<Vec<Option<Tensor<R>>>> {
                    Ok(vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * x)?)])
                };
                Ok(g.record("corrupted_square", &[v[0]], value, Some(Box::new(backward))))
            }),
        ))
    };
    repeated("corrupted_square", 1, seed, &GradCheckConfig::for_type::<R>(), &make, None)
}
