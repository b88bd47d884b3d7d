mod common;

use avatar_core::config::InvertConfig;
use avatar_core::controller::MotionSignal;
use avatar_core::engine::Tensor;
use avatar_core::generator::{interpolate_identity, LatentCodePlus};
use avatar_core::inversion::{invert_identity, psnr, FrameSample};
use avatar_core::losses::{AnimationLoss, LossConfig};
use avatar_core::model::{add_codes, Model};
use avatar_core::renderer::Camera;
use avatar_core::synthetic::{EXPRESSION_DIMS, MOTION_DIMS};
use common::{tiny_model, tiny_render};

fn model() -> Model<f32> {
    Model::init(&tiny_model(), 21).unwrap()
}

fn motion(phase: f32) -> MotionSignal<f32> {
    let mc = tiny_model();
    MotionSignal::new(Tensor::from_fn(&[mc.window, MOTION_DIMS], |i| (i as f32 * 0.7 + phase).sin() * 0.4), EXPRESSION_DIMS).unwrap()
}

fn camera(azimuth: f64) -> Camera {
    Camera::orbit([0.0; 3], 2.5, azimuth, 0.1, 0.7, 12, 1.3, 3.7)
}

fn shifted(m: &Model<f32>, scale: f32) -> LatentCodePlus<f32> {
    let w = m.w_avg_plus();
    let (l, d) = (w.layers(), w.dim());
    LatentCodePlus::new(w.tensor().zip_map(&Tensor::from_fn(&[l, d], |i| (i as f32 * 1.3).cos() * scale), |a, b| a + b).unwrap()).unwrap()
}

/// A reference frame rendered from a known identity code.
fn planted(m: &Model<f32>) -> FrameSample<f32> {
    let (x, cam) = (motion(0.3), camera(0.2));
    let image = m.animate(&shifted(m, 0.4), &x, &cam, &tiny_render()).unwrap();
    FrameSample { image, motion: x, camera: cam, boxes: vec![] }
}

fn loss() -> AnimationLoss<f32> {
    AnimationLoss::new(LossConfig { smoothness_samples: 0, ..LossConfig::default() }).unwrap()
}

#[test]
fn inversion_descends_and_leaves_the_model_untouched() {
    let m = model();
    let before = (m.generator_checksum(), m.controller_checksum(), m.w_avg.clone());
    let reference = planted(&m);
    let inv = invert_identity(&m, &loss(), &reference, &tiny_render(), &InvertConfig { steps: 15, lr: 0.02 }).unwrap();
    assert_eq!(inv.losses.len(), 31);
    assert!(inv.final_loss() < inv.initial_loss(), "{:?}", inv.losses);
    assert_eq!((m.generator_checksum(), m.controller_checksum(), m.w_avg.clone()), before);

    let start = m.animate(&m.w_avg_plus(), &reference.motion, &reference.camera, &tiny_render()).unwrap();
    let end = m.animate(&inv.code, &reference.motion, &reference.camera, &tiny_render()).unwrap();
    assert!(psnr(&end, &reference.image).unwrap() > psnr(&start, &reference.image).unwrap());
}

#[test]
fn animation_is_a_pure_function_of_its_inputs() {
    let m = model();
    let w = shifted(&m, 0.2);
    let a = m.animate(&w, &motion(0.0), &camera(0.0), &tiny_render()).unwrap();
    assert_eq!(a, m.animate(&w, &motion(0.0), &camera(0.0), &tiny_render()).unwrap());
    let via_code = m.render_code(&add_codes(&w, &m.motion_code(&motion(0.0)).unwrap()).unwrap(), &camera(0.0), &tiny_render()).unwrap();
    assert_eq!(a, via_code);
    assert_ne!(a, m.animate(&w, &motion(0.0), &camera(0.4), &tiny_render()).unwrap());
    assert_ne!(a, m.animate(&w, &motion(1.0), &camera(0.0), &tiny_render()).unwrap());
}

#[test]
fn motion_code_does_not_depend_on_identity() {
    let m = model();
    let wx = m.motion_code(&motion(0.5)).unwrap();
    let (a, b) = (shifted(&m, 0.3), shifted(&m, -0.6));
    let da = add_codes(&a, &wx).unwrap().tensor().zip_map(a.tensor(), |x, y| x - y).unwrap();
    let db = add_codes(&b, &wx).unwrap().tensor().zip_map(b.tensor(), |x, y| x - y).unwrap();
    assert!(da.max_abs_diff(&db) < 1e-6);
}

#[test]
fn interpolation_endpoints_and_continuity() {
    let m = model();
    let (a, b) = (shifted(&m, 0.5), shifted(&m, -0.5));
    assert_eq!(interpolate_identity(&a, &b, 1.0).unwrap(), a);
    assert_eq!(interpolate_identity(&a, &b, 0.0).unwrap(), b);
    assert!(interpolate_identity(&a, &b, 1.5).is_err());
    assert!(interpolate_identity(&a, &b, -0.1).is_err());

    let neg = LatentCodePlus::new(a.tensor().map(|v| -v)).unwrap();
    assert!(interpolate_identity(&a, &neg, 0.5).unwrap().tensor().data().iter().all(|&v| v == 0.0));

    let (x, cam) = (motion(0.1), camera(0.0));
    let frames: Vec<Tensor<f32>> = (0..=10)
        .map(|i| m.animate(&interpolate_identity(&a, &b, i as f64 / 10.0).unwrap(), &x, &cam, &tiny_render()).unwrap())
        .collect();
    assert_eq!(frames[10], m.animate(&a, &x, &cam, &tiny_render()).unwrap());
    let mut steps: Vec<f64> = frames.windows(2).map(|w| avatar_core::inversion::mean_abs_diff(&w[0], &w[1]).unwrap()).collect();
    let biggest = steps.iter().cloned().fold(0.0, f64::max);
    steps.sort_by(|p, q| p.partial_cmp(q).unwrap());
    assert!(biggest <= 3.0 * steps[steps.len() / 2], "steps {steps:?}");
}
