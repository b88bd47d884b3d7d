//! Throughput harness for the inference path, with a dense coordinate-MLP
//! decoder as the baseline for per-point cost.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::controller::MotionSignal;
use crate::engine::{Graph, Real, Tensor};
use crate::model::{add_codes, Model};
use crate::nn::{BoundLinear, Linear};
use crate::renderer::{composite, render, sample_rays, Camera, RenderConfig};
use crate::triplane::DECODER_SLOPE;
use crate::Result;

pub const BASELINE_LAYERS: usize = 8;
pub const BASELINE_WIDTH: usize = 64;

/// Dense MLP on raw 3-D positions: `BASELINE_LAYERS` hidden layers of
/// `BASELINE_WIDTH`, then the same RGB and density heads as the tri-plane
/// decoder.
#[derive(Clone, Debug)]
pub struct DenseMlpDecoder<R: Real = f32> {
    pub hidden: Vec<Linear<R>>,
    pub rgb: Linear<R>,
    pub density: Linear<R>,
}

impl<R: Real> DenseMlpDecoder<R> {
    pub fn init(layers: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = (0..layers).map(|i| Linear::init(if i == 0 { 3 } else { width }, width, &mut rng)).collect();
        Self { hidden, rgb: Linear::init(width, 3, &mut rng), density: Linear::init(width, 1, &mut rng) }
    }

    pub fn macs_per_point(&self) -> usize {
        self.hidden.iter().map(Linear::macs).sum::<usize>() + self.rgb.macs() + self.density.macs()
    }

    /// Forward-only render of one camera with this decoder.
    pub fn render(&self, cam: &Camera, cfg: &RenderConfig) -> Result<Tensor<R>> {
        let samples = sample_rays(cam, cfg)?;
        let n = samples.rays * samples.samples;
        let mut g = Graph::<R>::new();
        let bind = |l: &Linear<R>, g: &mut Graph<R>| -> BoundLinear { l.bind(g, false) };
        let mut h = g.constant(Tensor::new(&[n, 3], samples.points.iter().map(|&v| R::of(v)).collect())?);
        for layer in &self.hidden {
            let b = bind(layer, &mut g);
            let z = b.forward(&mut g, h)?;
            h = g.leaky_relu(z, DECODER_SLOPE);
        }
        let (brgb, bsig) = (bind(&self.rgb, &mut g), bind(&self.density, &mut g));
        let rgb = brgb.forward(&mut g, h)?;
        let rgb = g.sigmoid(rgb);
        let sigma = bsig.forward(&mut g, h)?;
        let sigma = g.softplus(sigma);
        let pixels = composite(&mut g, rgb, sigma, &samples.deltas, samples.samples, cfg.background)?;
        let img = g.reshape(pixels, &[cam.height, cam.width, 3])?;
        Ok(g.value(img).clone())
    }
}

/// Analytic FLOPs (2 per multiply-accumulate) for one tri-plane point:
/// three bilinear lookups of `channels` features plus the decoder MLP.
pub fn triplane_flops_per_point(channels: usize, decoder_macs: usize) -> usize {
    2 * (3 * 4 * channels + decoder_macs)
}

pub fn dense_flops_per_point(macs: usize) -> usize {
    2 * macs
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub image_size: usize,
    pub samples_per_ray: usize,
    pub points_per_frame: u64,
    /// Decoder invocations counted while rendering one frame.
    pub decodes_per_frame: u64,
    pub triplane_flops_per_point: usize,
    pub baseline_flops_per_point: usize,
    pub volumes_per_sec: f64,
    pub rays_per_sec: f64,
    pub frames_per_sec: f64,
    pub baseline_rays_per_sec: f64,
}

impl BenchReport {
    pub fn one_decode_per_point(&self) -> bool {
        self.decodes_per_frame == self.points_per_frame
    }

    pub fn summary(&self) -> String {
        format!(
            "generator: {:.2} volumes/s\nrenderer: {:.0} rays/s ({} samples/ray)\nend-to-end: {:.2} frames/s at {}x{}\n\
             decodes per frame: {} for {} points\nper-point FLOPs: tri-plane {} vs dense {}x{} MLP {}\n\
             dense baseline: {:.0} rays/s\n",
            self.volumes_per_sec,
            self.rays_per_sec,
            self.samples_per_ray,
            self.frames_per_sec,
            self.image_size,
            self.image_size,
            self.decodes_per_frame,
            self.points_per_frame,
            self.triplane_flops_per_point,
            BASELINE_LAYERS,
            BASELINE_WIDTH,
            self.baseline_flops_per_point,
            self.baseline_rays_per_sec,
        )
    }
}

fn per_sec(repeats: usize, f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let start = Instant::now();
    for _ in 0..repeats {
        f()?;
    }
    Ok(repeats as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

/// Times the generator, the renderer and full animation on one camera of
/// `image_size` pixels square.
pub fn run_bench(model: &Model<f32>, render_cfg: &RenderConfig, image_size: usize, repeats: usize) -> Result<BenchReport> {
    let mc = &model.config;
    let cam = Camera::orbit([0.0; 3], 2.5, 0.3, 0.15, 0.7, image_size, 1.3, 3.7);
    let w = model.w_avg_plus();
    let motion = MotionSignal::new(
        Tensor::from_fn(&[mc.window, mc.expression_dims + mc.pose_dims], |i| (i as f32 * 0.37).sin() * 0.5),
        mc.expression_dims,
    )?;
    let volume = model.volume(&w)?;
    let rays = (image_size * image_size) as f64;

    model.decoder.counter.reset();
    render(&volume, &model.decoder, &cam, render_cfg)?;
    let decodes_per_frame = model.decoder.counter.get();
    let points_per_frame = (image_size * image_size * render_cfg.samples_per_ray) as u64;

    let volumes_per_sec = per_sec(repeats, &mut || model.volume(&w).map(drop))?;
    let rays_per_sec = rays * per_sec(repeats, &mut || render(&volume, &model.decoder, &cam, render_cfg).map(drop))?;
    let frames_per_sec = per_sec(repeats, &mut || {
        let code = add_codes(&w, &model.motion_code(&motion)?)?;
        model.render_code(&code, &cam, render_cfg).map(drop)
    })?;
    let dense = DenseMlpDecoder::<f32>::init(BASELINE_LAYERS, BASELINE_WIDTH, 0);
    let baseline_rays_per_sec = rays * per_sec(repeats, &mut || dense.render(&cam, render_cfg).map(drop))?;

    Ok(BenchReport {
        repeats,
        image_size,
        samples_per_ray: render_cfg.samples_per_ray,
        points_per_frame,
        decodes_per_frame,
        triplane_flops_per_point: triplane_flops_per_point(mc.plane_channels, model.decoder.macs_per_point()),
        baseline_flops_per_point: dense_flops_per_point(dense.macs_per_point()),
        volumes_per_sec,
        rays_per_sec,
        frames_per_sec,
        baseline_rays_per_sec,
    })
}
