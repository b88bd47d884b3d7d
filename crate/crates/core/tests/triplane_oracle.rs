mod common;

use avatar_core::engine::{Graph, Tensor};
use avatar_core::triplane::{triplane_sample, TriPlaneVolume};
use common::brute_force_triplane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(p: usize, c: usize, extent: f64, seed: u64) -> TriPlaneVolume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Tensor::from_fn(&[p, p, 3, c], |_| rng.random_range(-1.0..1.0));
    TriPlaneVolume::new(f, extent).unwrap()
}

/// Points mostly inside the volume, with some past the faces to exercise clamping.
fn random_points(n: usize, extent: f64, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.2 * extent..1.2 * extent))).collect()
}

#[test]
fn point_sampling_matches_brute_force_oracle() {
    let vol = random_volume(7, 5, 1.3, 1);
    let mut worst = 0.0f64;
    for x in random_points(1000, 1.3, 2) {
        let got = vol.sample(x);
        for (a, b) in got.iter().zip(brute_force_triplane(&vol, x)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst:e}");
}

#[test]
fn graph_sampling_matches_brute_force_oracle() {
    let vol = random_volume(5, 3, 0.8, 3);
    let pts = random_points(1000, 0.8, 4);
    let mut g = Graph::<f64>::new();
    let f = g.constant(vol.features().clone());
    let p = g.constant(Tensor::new(&[pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap());
    let out = triplane_sample(&mut g, f, p, vol.extent()).unwrap();
    let got = g.value(out);
    assert_eq!(got.shape(), &[1000, 3]);
    for (n, x) in pts.iter().enumerate() {
        for (a, b) in got.row(n).iter().zip(brute_force_triplane(&vol, *x)) {
            assert!((a - b).abs() <= 1e-6, "point {n}: {a} vs {b}");
        }
    }
}

#[test]
fn single_precision_tracks_the_oracle() {
    let vol = random_volume(6, 4, 1.0, 5);
    let vol32 = TriPlaneVolume::<f32>::new(vol.features().cast(), 1.0).unwrap();
    for x in random_points(1000, 1.0, 6) {
        let got = vol32.sample(x.map(|v| v as f32));
        for (a, b) in got.iter().zip(brute_force_triplane(&vol, x)) {
            assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn texel_centres_return_stored_features() {
    let vol = random_volume(4, 2, 1.0, 7);
    // Texel (i, j) of every plane sits at normalized coordinate -1 + 2i/(P-1).
    let at = |i: usize| -1.0 + 2.0 * i as f64 / 3.0;
    let (i, j, k) = (1, 2, 3);
    let x = [at(i), at(j), at(k)];
    let want: Vec<f64> = (0..2)
        .map(|c| vol.plane(0).data()[(j * 4 + i) * 2 + c] + vol.plane(1).data()[(k * 4 + i) * 2 + c] + vol.plane(2).data()[(k * 4 + j) * 2 + c])
        .collect();
    for (a, b) in vol.sample(x).iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}
