//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::path::Path;

use avatar_core::config::{ModelConfig, TrainConfig};
use avatar_core::renderer::{Camera, RenderConfig};
use avatar_core::synthetic::{make_dataset, Dataset, DatasetSpec, EXPRESSION_DIMS, POSE_DIMS};
use avatar_core::triplane::TriPlaneVolume;

/// A model small enough to train for a few iterations in a test.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        latent_dim: 6,
        layers: 3,
        codebook: 3,
        resolution: 8,
        plane_channels: 4,
        generator_channels: 4,
        decoder_hidden: 8,
        mlp_width: 16,
        expression_dims: EXPRESSION_DIMS,
        pose_dims: POSE_DIMS,
        window: 3,
        extent: 1.0,
        average_samples: 64,
    }
}

pub fn tiny_render() -> RenderConfig {
    RenderConfig { samples_per_ray: 6, ..RenderConfig::default() }
}

pub fn tiny_train(n_id: usize, n_mo: usize) -> TrainConfig {
    TrainConfig { n_id, n_mo, iterations: 1, lr_nets: 1e-3, ema_beta: 0.9, batch: 1, ..TrainConfig::default() }
}

/// Four identities (one held out) of `frames` frames at 16x16.
pub fn tiny_dataset(dir: &Path, frames: usize) -> Dataset {
    let spec = DatasetSpec { identities: 4, frames, image_size: 16, seed: 5, render: tiny_render() };
    make_dataset(dir, &spec).unwrap();
    Dataset::load(dir).unwrap()
}

/// Bilinear lookup by summing every texel with its tent weight
/// `max(0, 1 - |u - i|) * max(0, 1 - |v - j|)`, coordinates clamped to the
/// plane.
pub fn brute_force_plane(plane: &[f64], p: usize, c: usize, u: f64, v: f64) -> Vec<f64> {
    let to_texel = |t: f64| ((t + 1.0) / 2.0 * (p - 1) as f64).clamp(0.0, (p - 1) as f64);
    let (tu, tv) = (to_texel(u), to_texel(v));
    let mut out = vec![0.0; c];
    for j in 0..p {
        for i in 0..p {
            let w = (1.0 - (tu - i as f64).abs()).max(0.0) * (1.0 - (tv - j as f64).abs()).max(0.0);
            for k in 0..c {
                out[k] += w * plane[(j * p + i) * c + k];
            }
        }
    }
    out
}

/// Tri-plane feature at `x` as the sum of the xy, xz and yz lookups.
pub fn brute_force_triplane(vol: &TriPlaneVolume<f64>, x: [f64; 3]) -> Vec<f64> {
    let (p, c, e) = (vol.resolution(), vol.channels(), vol.extent());
    let mut out = vec![0.0; c];
    for (k, (a, b)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
        let plane = vol.plane(k);
        for (o, f) in out.iter_mut().zip(brute_force_plane(plane.data(), p, c, x[a] / e, x[b] / e)) {
            *o += f;
        }
    }
    out
}

/// Pixel color for a ray through the slab `z0 <= z <= z1` of constant
/// `sigma` and `color`, clipped to `[near, far]`, over `background`.
pub fn slab_closed_form(origin: [f64; 3], dir: [f64; 3], cam: &Camera, z0: f64, z1: f64, sigma: f64, color: f64, background: f64) -> f64 {
    let (ta, tb) = ((z0 - origin[2]) / dir[2], (z1 - origin[2]) / dir[2]);
    let enter = ta.min(tb).max(cam.near);
    let exit = ta.max(tb).min(cam.far);
    let length = (exit - enter).max(0.0);
    let t = (-sigma * length).exp();
    color * (1.0 - t) + background * t
}
