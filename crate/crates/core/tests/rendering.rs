mod common;

use avatar_core::engine::{Graph, Tensor};
use avatar_core::renderer::{composite, ray_weights, render, render_field, Camera, RadianceField, RenderConfig};
use avatar_core::synthetic::SlabField;
use avatar_core::triplane::{FeatureDecoder, TriPlaneVolume};
use common::slab_closed_form;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Empty;

impl RadianceField for Empty {
    fn query(&self, _p: [f64; 3]) -> ([f64; 3], f64) {
        ([0.3, 0.6, 0.9], 0.0)
    }
}

fn front_camera(size: usize) -> Camera {
    Camera { position: [0.0, 0.0, 3.0], look_at: [0.0; 3], up: [0.0, 1.0, 0.0], fov_y: 0.7, height: size, width: size, near: 1.3, far: 3.7 }
}

#[test]
fn weights_are_nonnegative_and_sum_to_at_most_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let n = rng.random_range(1..64);
        // Mix of empty, thin and saturating densities.
        let sigmas: Vec<f32> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => rng.random_range(0.0..0.1),
                2 => rng.random_range(0.0..5.0),
                _ => rng.random_range(0.0..1e4),
            })
            .collect();
        let deltas: Vec<f32> = (0..n).map(|_| rng.random_range(1e-4..0.5)).collect();
        let w = ray_weights(&sigmas, &deltas).unwrap();
        assert!(w.iter().all(|&x| x >= 0.0), "{w:?}");
        let total: f64 = w.iter().map(|&x| x as f64).sum();
        assert!(total <= 1.0 + 1e-6, "sum {total}");
    }
}

#[test]
fn zero_density_scene_renders_exact_background() {
    let cfg = RenderConfig { samples_per_ray: 16, background: [0.25, 0.5, 0.75], ..RenderConfig::default() };
    let img: Tensor<f32> = render_field(&Empty, &front_camera(8), &cfg).unwrap();
    for px in img.data().chunks(3) {
        assert_eq!(px, &[0.25, 0.5, 0.75]);
    }

    // Same through the differentiable compositor.
    let mut g = Graph::<f64>::new();
    let rgb = g.constant(Tensor::full(&[4 * 6, 3], 0.9));
    let sigma = g.constant(Tensor::zeros(&[4 * 6, 1]));
    let out = composite(&mut g, rgb, sigma, &[0.1; 24], 6, cfg.background).unwrap();
    for px in g.value(out).data().chunks(3) {
        assert_eq!(px, &[0.25, 0.5, 0.75]);
    }
}

#[test]
fn constant_slab_matches_closed_form_transmittance() {
    let cam = front_camera(16);
    let cfg = RenderConfig { samples_per_ray: 48, background: [1.0; 3], ..RenderConfig::default() };
    let slab = SlabField { z0: -0.45, z1: 0.55, sigma: 0.8, color: [0.6; 3] };
    let img: Tensor<f64> = render_field(&slab, &cam, &cfg).unwrap();
    let rays = cam.generate_rays().unwrap();
    let mut worst = 0.0f64;
    for (ray, px) in rays.iter().zip(img.data().chunks(3)) {
        let want = slab_closed_form(ray.origin, ray.direction, &cam, slab.z0, slab.z1, slab.sigma, 0.6, 1.0);
        worst = worst.max((px[0] - want).abs() / want);
    }
    assert!(worst < 0.02, "worst relative error {worst}");
}

#[test]
fn doubling_samples_moves_slab_render_less_than_its_error() {
    let cam = front_camera(8);
    let slab = SlabField { z0: -0.3, z1: 0.4, sigma: 1.5, color: [0.2; 3] };
    let at = |s: usize| -> Tensor<f64> { render_field(&slab, &cam, &RenderConfig { samples_per_ray: s, ..RenderConfig::default() }).unwrap() };
    let (coarse, fine) = (at(24), at(48));
    let rays = cam.generate_rays().unwrap();
    let (mut err, mut fine_err, mut change) = (0.0f64, 0.0f64, 0.0f64);
    for ((ray, c), f) in rays.iter().zip(coarse.data().chunks(3)).zip(fine.data().chunks(3)) {
        let want = slab_closed_form(ray.origin, ray.direction, &cam, slab.z0, slab.z1, slab.sigma, 0.2, 1.0);
        err = err.max((c[0] - want).abs());
        fine_err = fine_err.max((f[0] - want).abs());
        change = change.max((c[0] - f[0]).abs());
    }
    assert!(fine_err < err, "fine {fine_err} vs coarse {err}");
    assert!(change <= 2.0 * err + 1e-12, "change {change} vs coarse error {err}");
}

#[test]
fn rendering_is_deterministic_and_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vol = TriPlaneVolume::new(Tensor::<f32>::from_fn(&[6, 6, 3, 4], |_| rng.random_range(-1.0..1.0)), 1.0).unwrap();
    let dec = FeatureDecoder::<f32>::init(4, 8, &mut rng);
    let cfg = RenderConfig { samples_per_ray: 8, ..RenderConfig::default() };
    let a = render(&vol, &dec, &front_camera(6), &cfg).unwrap();
    let b = render(&vol, &dec, &front_camera(6), &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(dec.counter.get(), 2 * 6 * 6 * 8);
}
