//! Pinhole cameras, ray sampling and volume-rendering quadrature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{BackwardCtx, Graph, Real, Tensor, Var};
use crate::triplane::{triplane_sample, BoundDecoder, FeatureDecoder, TriPlaneVolume};
use crate::{Error, Result};

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub height: usize,
    pub width: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Camera {
    /// Camera on a sphere of `radius` around `target`, at the given
    /// azimuth (about +y, 0 = looking down -z) and elevation.
    #[allow(clippy::too_many_arguments)]
    pub fn orbit(target: Vec3, radius: f64, azimuth: f64, elevation: f64, fov_y: f64, size: usize, near: f64, far: f64) -> Self {
        let dir = [elevation.cos() * azimuth.sin(), elevation.sin(), elevation.cos() * azimuth.cos()];
        Self {
            position: [target[0] + radius * dir[0], target[1] + radius * dir[1], target[2] + radius * dir[2]],
            look_at: target,
            up: [0.0, 1.0, 0.0],
            fov_y,
            height: size,
            width: size,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!("camera needs 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!("fov_y must lie in (0, pi), got {}", self.fov_y)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("camera resolution must be positive".into()));
        }
        Ok(())
    }

    /// Orthonormal (forward, right, up) frame.
    pub fn basis(&self) -> Result<(Vec3, Vec3, Vec3)> {
        self.validate()?;
        let f = sub(self.look_at, self.position);
        if norm(f) < 1e-12 {
            return Err(Error::InvalidArgument("camera position equals look_at".into()));
        }
        let f = normalize(f);
        let r = cross(f, self.up);
        if norm(r) < 1e-9 * norm(self.up).max(1e-300) || norm(self.up) < 1e-12 {
            return Err(Error::InvalidArgument("camera up vector is parallel to the view direction".into()));
        }
        let r = normalize(r);
        Ok((f, r, cross(r, f)))
    }

    /// One ray per pixel in row-major order; pixel (0, 0) is top-left.
    pub fn generate_rays(&self) -> Result<Vec<Ray>> {
        let (f, r, u) = self.basis()?;
        let tan = (0.5 * self.fov_y).tan();
        let aspect = self.width as f64 / self.height as f64;
        let mut rays = Vec::with_capacity(self.height * self.width);
        for i in 0..self.height {
            let y = (1.0 - 2.0 * (i as f64 + 0.5) / self.height as f64) * tan;
            for j in 0..self.width {
                let x = (2.0 * (j as f64 + 0.5) / self.width as f64 - 1.0) * tan * aspect;
                let d = [f[0] + x * r[0] + y * u[0], f[1] + x * r[1] + y * u[1], f[2] + x * r[2] + y * u[2]];
                rays.push(Ray { origin: self.position, direction: normalize(d) });
            }
        }
        Ok(rays)
    }

    /// Projects a world point to continuous pixel coordinates (column, row),
    /// where pixel `(i, j)` covers `[j, j+1) x [i, i+1)`. `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Result<Option<[f64; 2]>> {
        let (f, r, u) = self.basis()?;
        let d = sub(p, self.position);
        let depth = d[0] * f[0] + d[1] * f[1] + d[2] * f[2];
        if depth <= 1e-9 {
            return Ok(None);
        }
        let tan = (0.5 * self.fov_y).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = (d[0] * r[0] + d[1] * r[1] + d[2] * r[2]) / depth / (tan * aspect);
        let y = (d[0] * u[0] + d[1] * u[1] + d[2] * u[2]) / depth / tan;
        Ok(Some([(x + 1.0) * 0.5 * self.width as f64, (1.0 - y) * 0.5 * self.height as f64]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub background: [f64; 3],
    pub stratified_jitter: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { samples_per_ray: 48, background: [1.0, 1.0, 1.0], stratified_jitter: false, seed: 0 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::InvalidArgument(format!("samples_per_ray must be >= 2, got {}", self.samples_per_ray)));
        }
        Ok(())
    }
}

/// Sample positions for every ray of a camera: `points` is `[rays * samples, 3]`
/// and `deltas` the matching segment lengths.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub rays: usize,
    pub samples: usize,
    pub points: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Uniform depth bins over `[near, far]`; one sample per bin at the bin
/// centre, or at a seeded uniform position inside the bin when jittered.
pub fn sample_rays(cam: &Camera, cfg: &RenderConfig) -> Result<RaySamples> {
    cfg.validate()?;
    let rays = cam.generate_rays()?;
    let s = cfg.samples_per_ray;
    let bin = (cam.far - cam.near) / s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = Vec::with_capacity(rays.len() * s * 3);
    for ray in &rays {
        for i in 0..s {
            let offset = if cfg.stratified_jitter { rng.random::<f64>() } else { 0.5 };
            let t = cam.near + (i as f64 + offset) * bin;
            points.extend((0..3).map(|a| ray.origin[a] + t * ray.direction[a]));
        }
    }
    Ok(RaySamples { rays: rays.len(), samples: s, points, deltas: vec![bin; rays.len() * s] })
}

/// Per-sample compositing weights `w_i = T_i (1 - exp(-sigma_i delta_i))`.
pub fn ray_weights<R: Real>(sigmas: &[R], deltas: &[R]) -> Result<Vec<R>> {
    let mut t = R::one();
    let mut out = Vec::with_capacity(sigmas.len());
    for (&s, &d) in sigmas.iter().zip(deltas) {
        check_sample(s, d)?;
        let e = (-s * d).exp();
        out.push(t * (R::one() - e));
        t = t * e;
    }
    Ok(out)
}

fn check_sample<R: Real>(sigma: R, delta: R) -> Result<()> {
    if !(sigma >= R::zero()) {
        return Err(Error::InvalidArgument(format!("negative density {sigma}")));
    }
    if !(delta > R::zero()) {
        return Err(Error::InvalidArgument(format!("segment length must be positive, got {delta}")));
    }
    Ok(())
}

/// Composites one ray from `(rgb, density, delta)` samples over `background`.
pub fn composite_ray<R: Real>(samples: &[([R; 3], R, R)], background: [R; 3]) -> Result<[R; 3]> {
    let mut t = R::one();
    let mut acc = [R::zero(); 3];
    for &(c, s, d) in samples {
        check_sample(s, d)?;
        let e = (-s * d).exp();
        let w = t * (R::one() - e);
        for k in 0..3 {
            acc[k] += w * c[k];
        }
        t = t * e;
    }
    Ok([acc[0] + t * background[0], acc[1] + t * background[1], acc[2] + t * background[2]])
}

/// Differentiable compositing: `rgb[rays * s, 3]`, `sigma[rays * s, 1]` -> `[rays, 3]`.
pub fn composite<R: Real>(
    g: &mut Graph<R>,
    rgb: Var,
    sigma: Var,
    deltas: &[f64],
    samples: usize,
    background: [f64; 3],
) -> Result<Var> {
    let n = g.shape(rgb)[0];
    if g.shape(rgb) != [n, 3] || g.shape(sigma) != [n, 1] || deltas.len() != n || samples == 0 || n % samples != 0 {
        return Err(Error::Shape(format!(
            "composite: rgb {:?}, sigma {:?}, {} deltas, {samples} samples per ray",
            g.shape(rgb),
            g.shape(sigma),
            deltas.len()
        )));
    }
    let rays = n / samples;
    let deltas: Vec<R> = deltas.iter().map(|&d| R::of(d)).collect();
    let bg = background.map(R::of);
    let mut out = Vec::with_capacity(rays * 3);
    {
        let (c, s) = (g.value(rgb).data(), g.value(sigma).data());
        for r in 0..rays {
            let mut t = R::one();
            let mut acc = [R::zero(); 3];
            for i in r * samples..(r + 1) * samples {
                check_sample(s[i], deltas[i])?;
                let e = (-s[i] * deltas[i]).exp();
                let w = t * (R::one() - e);
                for k in 0..3 {
                    acc[k] += w * c[3 * i + k];
                }
                t = t * e;
            }
            out.extend((0..3).map(|k| acc[k] + t * bg[k]));
        }
    }
    let value = Tensor::new(&[rays, 3], out)?;
    let backward = move |ctx: &BackwardCtx<'_, R>| -> Result<Vec<Option<Tensor<R>>>> {
        let (c, s, o, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.output.data(), ctx.grad.data());
        let mut gc = vec![R::zero(); n * 3];
        let mut gs = vec![R::zero(); n];
        for r in 0..rays {
            let go = &gd[3 * r..3 * r + 3];
            let out_dot = o[3 * r] * go[0] + o[3 * r + 1] * go[1] + o[3 * r + 2] * go[2];
            let mut t = R::one();
            let mut prefix = R::zero();
            for i in r * samples..(r + 1) * samples {
                let e = (-s[i] * deltas[i]).exp();
                let w = t * (R::one() - e);
                let c_dot = c[3 * i] * go[0] + c[3 * i + 1] * go[1] + c[3 * i + 2] * go[2];
                for k in 0..3 {
                    gc[3 * i + k] = w * go[k];
                }
                prefix += w * c_dot;
                t = t * e;
                gs[i] = deltas[i] * (t * c_dot - (out_dot - prefix));
            }
        }
        Ok(vec![
            ctx.needs[0].then(|| Tensor::new(&[n, 3], gc)).transpose()?,
            ctx.needs[1].then(|| Tensor::new(&[n, 1], gs)).transpose()?,
        ])
    };
    Ok(g.record("composite", &[rgb, sigma], value, Some(Box::new(backward))))
}

/// Differentiable render of tri-plane `features` (`[P, P, 3, C]`) through a
/// bound decoder; returns an `[H, W, 3]` image.
#[allow(clippy::too_many_arguments)]
pub fn render_graph<R: Real>(
    g: &mut Graph<R>,
    features: Var,
    extent: f64,
    decoder: &FeatureDecoder<R>,
    bound: &BoundDecoder,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<Var> {
    let samples = sample_rays(cam, cfg)?;
    let n = samples.rays * samples.samples;
    let pts = g.constant(Tensor::new(&[n, 3], samples.points.iter().map(|&v| R::of(v)).collect())?);
    let feats = triplane_sample(g, features, pts, extent)?;
    let (rgb, sigma) = decoder.forward(g, bound, feats)?;
    let pixels = composite(g, rgb, sigma, &samples.deltas, samples.samples, cfg.background)?;
    g.reshape(pixels, &[cam.height, cam.width, 3])
}

/// Forward-only render of a volume.
pub fn render<R: Real>(
    volume: &TriPlaneVolume<R>,
    decoder: &FeatureDecoder<R>,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<Tensor<R>> {
    let mut g = Graph::new();
    let f = g.constant(volume.features().clone());
    let bound = decoder.bind(&mut g, false);
    let img = render_graph(&mut g, f, volume.extent(), decoder, &bound, cam, cfg)?;
    Ok(g.value(img).clone())
}

/// A closed-form radiance field.
pub trait RadianceField {
    fn query(&self, p: Vec3) -> ([f64; 3], f64);
}

/// Forward-only render of an analytic field with the same quadrature.
pub fn render_field<R: Real>(field: &dyn RadianceField, cam: &Camera, cfg: &RenderConfig) -> Result<Tensor<R>> {
    let samples = sample_rays(cam, cfg)?;
    let mut data = Vec::with_capacity(samples.rays * 3);
    let mut ray = Vec::with_capacity(samples.samples);
    for r in 0..samples.rays {
        ray.clear();
        for i in r * samples.samples..(r + 1) * samples.samples {
            let p = [samples.points[3 * i], samples.points[3 * i + 1], samples.points[3 * i + 2]];
            let (c, s) = field.query(p);
            ray.push((c, s, samples.deltas[i]));
        }
        let px = composite_ray(&ray, cfg.background)?;
        data.extend(px.iter().map(|&v| R::of(v)));
    }
    Tensor::new(&[cam.height, cam.width, 3], data)
}
