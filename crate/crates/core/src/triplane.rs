//! Tri-plane feature volumes and the lightweight feature decoder.
//!
//! A point `(x, y, z)` is projected onto the `xy`, `xz` and `yz` planes, each
//! plane is sampled bilinearly, and the three feature vectors are summed.
//! Plane coordinates are the world coordinates divided by `extent`; the
//! texel `(0, 0)` sits at `(-extent, -extent)` and texel `P-1` at `+extent`
//! (corner-aligned), with border clamping outside the cube.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::engine::kernels::{bilinear_axis, sigmoid, softplus};
use crate::engine::{BackwardCtx, Graph, Real, Tensor, Var};
use crate::nn::{leaky, BoundLinear, Linear, Params};
use crate::{Error, Result};

pub const PLANE_NAMES: [&str; 3] = ["plane_xy", "plane_xz", "plane_yz"];

/// World axes feeding (u, v) of each plane.
const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three axis-aligned `P x P x C` feature planes stored interleaved as
/// `[P (v), P (u), 3, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneVolume<R: Real = f32> {
    features: Tensor<R>,
    extent: f64,
}

impl<R: Real> TriPlaneVolume<R> {
    pub fn new(features: Tensor<R>, extent: f64) -> Result<Self> {
        let s = features.shape();
        if s.len() != 4 || s[0] != s[1] || s[2] != 3 || s[0] < 2 {
            return Err(Error::Shape(format!("tri-plane features must be [P, P, 3, C] with P >= 2, got {s:?}")));
        }
        if !(extent > 0.0) {
            return Err(Error::InvalidArgument(format!("extent must be positive, got {extent}")));
        }
        Ok(Self { features, extent })
    }

    /// Assembles a volume from three `[P, P, C]` planes (row = v, column = u).
    pub fn from_planes(planes: [&Tensor<R>; 3], extent: f64) -> Result<Self> {
        let s = planes[0].shape().to_vec();
        if s.len() != 3 || s[0] != s[1] || planes.iter().any(|p| p.shape() != s.as_slice()) {
            return Err(Error::Shape("planes must share one [P, P, C] shape".into()));
        }
        let (p, c) = (s[0], s[2]);
        let mut data = Vec::with_capacity(p * p * 3 * c);
        for texel in 0..p * p {
            for plane in planes {
                data.extend_from_slice(&plane.data()[texel * c..(texel + 1) * c]);
            }
        }
        Self::new(Tensor::new(&[p, p, 3, c], data)?, extent)
    }

    pub fn resolution(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[3]
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn features(&self) -> &Tensor<R> {
        &self.features
    }

    pub fn into_features(self) -> Tensor<R> {
        self.features
    }

    /// One plane (0 = xy, 1 = xz, 2 = yz) as `[P, P, C]`.
    pub fn plane(&self, k: usize) -> Tensor<R> {
        let (p, c) = (self.resolution(), self.channels());
        let mut data = Vec::with_capacity(p * p * c);
        for texel in 0..p * p {
            let base = (texel * 3 + k) * c;
            data.extend_from_slice(&self.features.data()[base..base + c]);
        }
        Tensor::new(&[p, p, c], data).expect("plane shape")
    }

    pub fn sample(&self, point: [R; 3]) -> Vec<R> {
        let mut out = vec![R::zero(); self.channels()];
        sample_into(self.features.data(), self.resolution(), self.channels(), self.extent, point, &mut out);
        out
    }
}

/// Plane coordinates `(xy, xz, yz)` of a point, normalized by `extent`.
pub fn project_point<R: Real>(p: [R; 3], extent: f64) -> [[R; 2]; 3] {
    let e = R::of(extent);
    PLANE_AXES.map(|(a, b)| [p[a] / e, p[b] / e])
}

#[inline]
fn texel_coord<R: Real>(normalized: R, p: usize) -> R {
    (normalized + R::one()) * R::of(0.5 * (p - 1) as f64)
}

fn sample_into<R: Real>(features: &[R], p: usize, c: usize, extent: f64, point: [R; 3], out: &mut [R]) {
    let proj = project_point(point, extent);
    for (k, uv) in proj.iter().enumerate() {
        let (u0, fu, _) = bilinear_axis(texel_coord(uv[0], p), p);
        let (v0, fv, _) = bilinear_axis(texel_coord(uv[1], p), p);
        for (dv, wv) in [(0, R::one() - fv), (1, fv)] {
            for (du, wu) in [(0, R::one() - fu), (1, fu)] {
                let base = (((v0 + dv) * p + u0 + du) * 3 + k) * c;
                let w = wv * wu;
                for (o, &f) in out.iter_mut().zip(&features[base..base + c]) {
                    *o += w * f;
                }
            }
        }
    }
}

/// Differentiable summed tri-plane lookup: `features[P, P, 3, C]`,
/// `points[N, 3]` -> `[N, C]`.
pub fn triplane_sample<R: Real>(g: &mut Graph<R>, features: Var, points: Var, extent: f64) -> Result<Var> {
    let (sf, sp) = (g.shape(features).to_vec(), g.shape(points).to_vec());
    if sf.len() != 4 || sf[0] != sf[1] || sf[2] != 3 || sf[0] < 2 || sp.len() != 2 || sp[1] != 3 {
        return Err(Error::Shape(format!("triplane_sample: features {sf:?}, points {sp:?}")));
    }
    let (p, c, n) = (sf[0], sf[3], sp[0]);
    let mut out = vec![R::zero(); n * c];
    {
        let (fd, pd) = (g.value(features).data(), g.value(points).data());
        for (pt, orow) in pd.chunks_exact(3).zip(out.chunks_exact_mut(c)) {
            sample_into(fd, p, c, extent, [pt[0], pt[1], pt[2]], orow);
        }
    }
    let value = Tensor::new(&[n, c], out)?;
    let backward = move |ctx: &BackwardCtx<'_, R>| -> Result<Vec<Option<Tensor<R>>>> {
        let (fd, pd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gf = ctx.needs[0].then(|| vec![R::zero(); fd.len()]);
        let mut gp = ctx.needs[1].then(|| vec![R::zero(); pd.len()]);
        let dt = R::of(0.5 * (p - 1) as f64 / extent);
        for (i, (pt, grow)) in pd.chunks_exact(3).zip(gd.chunks_exact(c)).enumerate() {
            let proj = project_point([pt[0], pt[1], pt[2]], extent);
            for (k, uv) in proj.iter().enumerate() {
                let (u0, fu, uc) = bilinear_axis(texel_coord(uv[0], p), p);
                let (v0, fv, vc) = bilinear_axis(texel_coord(uv[1], p), p);
                let at = |dv: usize, du: usize| (((v0 + dv) * p + u0 + du) * 3 + k) * c;
                if let Some(gf) = gf.as_mut() {
                    for (dv, wv) in [(0, R::one() - fv), (1, fv)] {
                        for (du, wu) in [(0, R::one() - fu), (1, fu)] {
                            let base = at(dv, du);
                            let w = wv * wu;
                            for (a, &gv) in gf[base..base + c].iter_mut().zip(grow) {
                                *a += w * gv;
                            }
                        }
                    }
                }
                if let Some(gp) = gp.as_mut() {
                    let diff = |a: usize, b: usize| -> R {
                        grow.iter().zip(&fd[a..a + c]).zip(&fd[b..b + c]).map(|((&g, &x), &y)| g * (y - x)).sum()
                    };
                    let (ua, va) = PLANE_AXES[k];
                    if !uc {
                        let d = (R::one() - fv) * diff(at(0, 0), at(0, 1)) + fv * diff(at(1, 0), at(1, 1));
                        gp[3 * i + ua] += d * dt;
                    }
                    if !vc {
                        let d = (R::one() - fu) * diff(at(0, 0), at(1, 0)) + fu * diff(at(0, 1), at(1, 1));
                        gp[3 * i + va] += d * dt;
                    }
                }
            }
        }
        Ok(vec![
            gf.map(|v| Tensor::new(&[p, p, 3, c], v)).transpose()?,
            gp.map(|v| Tensor::new(&[n, 3], v)).transpose()?,
        ])
    };
    Ok(g.record("triplane_sample", &[features, points], value, Some(Box::new(backward))))
}

/// Counts points pushed through the decoder.
#[derive(Debug, Default)]
pub struct DecodeCounter(AtomicU64);

impl DecodeCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::Relaxed);
    }
}

impl Clone for DecodeCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

pub const DECODER_SLOPE: f64 = 0.2;
pub const DENSITY_BIAS_INIT: f64 = -1.0;

/// Two hidden leaky-relu layers, then a sigmoid RGB head and a softplus
/// density head.
#[derive(Clone, Debug)]
pub struct FeatureDecoder<R: Real = f32> {
    pub hidden: [Linear<R>; 2],
    pub rgb: Linear<R>,
    pub density: Linear<R>,
    pub counter: DecodeCounter,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDecoder {
    pub hidden: [BoundLinear; 2],
    pub rgb: BoundLinear,
    pub density: BoundLinear,
}

impl<R: Real> FeatureDecoder<R> {
    pub fn init(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut density = Linear::init(hidden, 1, rng);
        density.bias = Tensor::full(&[1], R::of(DENSITY_BIAS_INIT));
        Self {
            hidden: [Linear::init(channels, hidden, rng), Linear::init(hidden, hidden, rng)],
            rgb: Linear::init(hidden, 3, rng),
            density,
            counter: DecodeCounter::default(),
        }
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            hidden: [Linear::zeros(channels, hidden), Linear::zeros(hidden, hidden)],
            rgb: Linear::zeros(hidden, 3),
            density: Linear::zeros(hidden, 1),
            counter: DecodeCounter::default(),
        }
    }

    pub fn channels(&self) -> usize {
        self.hidden[0].input_dim()
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden[0].output_dim()
    }

    /// Multiply-accumulates for one point.
    pub fn macs_per_point(&self) -> usize {
        self.hidden.iter().map(Linear::macs).sum::<usize>() + self.rgb.macs() + self.density.macs()
    }

    /// Single-point decode into `(rgb, density)`.
    pub fn decode(&self, feature: &[R]) -> Result<([R; 3], R)> {
        if feature.len() != self.channels() {
            return Err(Error::Shape(format!("decoder expects {} channels, got {}", self.channels(), feature.len())));
        }
        self.counter.add(1);
        let h = self.hidden[0].apply(feature).into_iter().map(|v| leaky(v, DECODER_SLOPE)).collect::<Vec<_>>();
        let h = self.hidden[1].apply(&h).into_iter().map(|v| leaky(v, DECODER_SLOPE)).collect::<Vec<_>>();
        let rgb = self.rgb.apply(&h);
        let sigma = self.density.apply(&h)[0];
        Ok(([sigmoid(rgb[0]), sigmoid(rgb[1]), sigmoid(rgb[2])], softplus(sigma)))
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> BoundDecoder {
        BoundDecoder {
            hidden: [self.hidden[0].bind(g, trainable), self.hidden[1].bind(g, trainable)],
            rgb: self.rgb.bind(g, trainable),
            density: self.density.bind(g, trainable),
        }
    }

    /// Batched decode of `features[N, C]` into `(rgb[N, 3], density[N, 1])`,
    /// one MLP pass per row.
    pub fn forward(&self, g: &mut Graph<R>, bound: &BoundDecoder, features: Var) -> Result<(Var, Var)> {
        let s = g.shape(features);
        if s.len() != 2 || s[1] != self.channels() {
            return Err(Error::Shape(format!("decoder expects [N, {}], got {s:?}", self.channels())));
        }
        self.counter.add(s[0]);
        let mut h = features;
        for layer in &bound.hidden {
            let z = layer.forward(g, h)?;
            h = g.leaky_relu(z, DECODER_SLOPE);
        }
        let rgb = bound.rgb.forward(g, h)?;
        let rgb = g.sigmoid(rgb);
        let sigma = bound.density.forward(g, h)?;
        let sigma = g.softplus(sigma);
        Ok((rgb, sigma))
    }
}

impl BoundDecoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for l in self.hidden.iter().chain([&self.rgb, &self.density]) {
            v.extend(l.vars());
        }
        v
    }

    /// Inverse of [`BoundDecoder::vars`].
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.len() != 8 {
            return Err(Error::Shape(format!("decoder binds 8 vars, got {}", vars.len())));
        }
        let lin = |i: usize| BoundLinear { weight: vars[i], bias: vars[i + 1] };
        Ok(Self { hidden: [lin(0), lin(2)], rgb: lin(4), density: lin(6) })
    }
}

impl<R: Real> Params<R> for FeatureDecoder<R> {
    fn named_params(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out = Vec::new();
        self.hidden[0].push_named("hidden0", &mut out);
        self.hidden[1].push_named("hidden1", &mut out);
        self.rgb.push_named("rgb", &mut out);
        self.density.push_named("density", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = Vec::new();
        let [h0, h1] = &mut self.hidden;
        h0.push_mut(&mut out);
        h1.push_mut(&mut out);
        self.rgb.push_mut(&mut out);
        self.density.push_mut(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_volume(p: usize, c: usize, value: f64) -> TriPlaneVolume<f64> {
        TriPlaneVolume::new(Tensor::full(&[p, p, 3, c], value), 1.0).unwrap()
    }

    #[test]
    fn projection_drops_one_axis() {
        assert_eq!(project_point([0.0f64, 0.0, 0.0], 1.0), [[0.0, 0.0]; 3]);
        assert_eq!(project_point([0.5f64, -0.5, 1.0], 1.0), [[0.5, -0.5], [0.5, 1.0], [-0.5, 1.0]]);
        assert_eq!(project_point([2.0f64, 0.0, 0.0], 1.0)[0], [2.0, 0.0]);
        assert_eq!(project_point([1.0f64, 2.0, 3.0], 2.0)[2], [1.0, 1.5]);
    }

    #[test]
    fn constant_planes_sum_to_three_times_value() {
        let v = const_volume(4, 2, 0.25);
        for pt in [[0.0, 0.0, 0.0], [0.9, -0.3, 0.1], [5.0, 5.0, -5.0]] {
            assert_eq!(v.sample(pt), vec![0.75, 0.75]);
        }
    }

    #[test]
    fn cell_centre_of_two_by_two_plane_is_corner_mean() {
        let xy = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let zero = Tensor::zeros(&[2, 2, 1]);
        let v = TriPlaneVolume::from_planes([&xy, &zero, &zero], 1.0).unwrap();
        assert_eq!(v.sample([0.0, 0.0, 0.0]), vec![1.5]);
        // Texel (0, 0) sits at (-extent, -extent); u follows x, v follows y.
        assert_eq!(v.sample([-1.0, -1.0, 0.3]), vec![0.0]);
        assert_eq!(v.sample([1.0, -1.0, 0.0]), vec![1.0]);
        assert_eq!(v.sample([-1.0, 1.0, 0.0]), vec![2.0]);
        // Outside the cube is clamped to the border.
        assert_eq!(v.sample([3.0, 3.0, 0.0]), vec![3.0]);
        assert_eq!(v.plane(0), xy);
    }

    #[test]
    fn graph_sampling_matches_point_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features = crate::nn::normal_tensor::<f64>(&[5, 5, 3, 2], 1.0, &mut rng);
        let vol = TriPlaneVolume::new(features.clone(), 1.5).unwrap();
        let pts: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let f = g.constant(features);
        let p = g.constant(Tensor::new(&[10, 3], pts.clone()).unwrap());
        let out = triplane_sample(&mut g, f, p, 1.5).unwrap();
        for i in 0..10 {
            let want = vol.sample([pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]]);
            assert_eq!(g.value(out).row(i), want.as_slice());
        }
    }

    #[test]
    fn zero_decoder_outputs_half_grey_and_log_two() {
        let d = FeatureDecoder::<f64>::zeros(4, 8);
        let (rgb, sigma) = d.decode(&[0.3, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
        assert!((sigma - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!(d.decode(&[0.0; 3]).is_err());
    }

    #[test]
    fn decoder_matches_hand_evaluation() {
        // 4 -> 2 -> 2 -> (3, 1) with fixed weights.
        let mut d = FeatureDecoder::<f64>::zeros(4, 2);
        d.hidden[0].weight = Tensor::new(&[4, 2], vec![1.0, -1.0, 0.5, 0.0, 0.0, 2.0, -1.0, 1.0]).unwrap();
        d.hidden[0].bias = Tensor::new(&[2], vec![0.1, -0.2]).unwrap();
        d.hidden[1].weight = Tensor::new(&[2, 2], vec![1.0, 0.5, -0.5, 1.0]).unwrap();
        d.hidden[1].bias = Tensor::new(&[2], vec![0.0, 0.3]).unwrap();
        d.rgb.weight = Tensor::new(&[2, 3], vec![1.0, 0.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        d.rgb.bias = Tensor::new(&[3], vec![0.0, 0.1, 0.2]).unwrap();
        d.density.weight = Tensor::new(&[2, 1], vec![0.7, -0.4]).unwrap();
        d.density.bias = Tensor::new(&[1], vec![-0.1]).unwrap();
        let f = [0.2, 0.4, -0.6, 1.0];
        // Layer 1: z = f W + b
        let z1 = [0.2 + 0.2 - 0.0 - 1.0 + 0.1, -0.2 + 0.0 - 1.2 + 1.0 - 0.2];
        let h1 = z1.map(|v: f64| if v >= 0.0 { v } else { 0.2 * v });
        let z2 = [h1[0] - 0.5 * h1[1], 0.5 * h1[0] + h1[1] + 0.3];
        let h2 = z2.map(|v: f64| if v >= 0.0 { v } else { 0.2 * v });
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let rgb = [s(h2[0]), s(h2[1] + 0.1), s(-h2[0] + 2.0 * h2[1] + 0.2)];
        let sigma = (0.7 * h2[0] - 0.4 * h2[1] - 0.1f64).exp().ln_1p();
        let (got_rgb, got_sigma) = d.decode(&f).unwrap();
        for (a, b) in got_rgb.iter().zip(rgb) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((got_sigma - sigma).abs() < 1e-6);
    }

    #[test]
    fn density_is_nonnegative_and_rgb_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = FeatureDecoder::<f32>::init(6, 16, &mut rng);
        for _ in 0..200 {
            let f: Vec<f32> = (0..6).map(|_| rng.random_range(-50.0..50.0)).collect();
            let (rgb, sigma) = d.decode(&f).unwrap();
            assert!(sigma >= 0.0);
            assert!(rgb.iter().all(|c| (0.0..=1.0).contains(c)));
        }
        assert_eq!(d.counter.get(), 200);
    }

    #[test]
    fn rejects_bad_volume() {
        assert!(TriPlaneVolume::<f32>::new(Tensor::zeros(&[4, 4, 2, 3]), 1.0).is_err());
        assert!(TriPlaneVolume::<f32>::new(Tensor::zeros(&[4, 4, 3, 3]), 0.0).is_err());
    }
}
