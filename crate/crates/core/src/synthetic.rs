//! Procedural "head" scenes with known identity and motion parameters,
//! rendered analytically, and the on-disk dataset built from them.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::controller::{format_motion_text, parse_motion_text};
use crate::engine::Tensor;
use crate::image_io::{read_ppm, write_ppm};
use crate::losses::RegionBox;
use crate::renderer::{render_field, Camera, RadianceField, RenderConfig, Vec3};
use crate::{Error, Result};

pub const IDENTITY_DIMS: usize = 6;
pub const EXPRESSION_DIMS: usize = 4;
pub const POSE_DIMS: usize = 4;
pub const MOTION_DIMS: usize = EXPRESSION_DIMS + POSE_DIMS;
/// Ground-truth renders use this many times the training sample count.
pub const ORACLE_SAMPLE_FACTOR: usize = 4;
pub const CAMERA_RADIUS: f64 = 2.5;
pub const CAMERA_FOV: f64 = 0.7;
pub const CAMERA_NEAR: f64 = 1.3;
pub const CAMERA_FAR: f64 = 3.7;
/// Half-width of the camera cap in azimuth and elevation.
pub const CAMERA_CAP: f64 = PI / 4.0;
const MANIFEST: &str = "manifest.json";

/// Identity: head width, head height, skin r/g/b offsets, eye spacing.
/// Expression: mouth aperture, brow raise, mouth width, eye openness.
/// Pose: yaw, pitch, roll (radians) and log-ish scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub identity: [f64; IDENTITY_DIMS],
    pub expression: [f64; EXPRESSION_DIMS],
    pub pose: [f64; POSE_DIMS],
}

impl SceneParams {
    pub fn neutral(identity: [f64; IDENTITY_DIMS]) -> Self {
        Self { identity, expression: [0.0; EXPRESSION_DIMS], pose: [0.0; POSE_DIMS] }
    }

    pub fn with_motion(&self, motion: &[f64]) -> Result<Self> {
        if motion.len() != MOTION_DIMS {
            return Err(Error::InvalidArgument(format!("motion vector needs {MOTION_DIMS} values, got {}", motion.len())));
        }
        let mut out = self.clone();
        out.expression.copy_from_slice(&motion[..EXPRESSION_DIMS]);
        out.pose.copy_from_slice(&motion[EXPRESSION_DIMS..]);
        Ok(out)
    }

    pub fn motion(&self) -> Vec<f64> {
        self.expression.iter().chain(&self.pose).copied().collect()
    }

    fn scale(&self) -> f64 {
        1.0 + 0.1 * self.pose[3]
    }

    /// Rotation `Rz(roll) Rx(pitch) Ry(yaw)` as a row-major 3x3 matrix.
    fn rotation(&self) -> [[f64; 3]; 3] {
        let (sy, cy) = self.pose[0].sin_cos();
        let (sp, cp) = self.pose[1].sin_cos();
        let (sr, cr) = self.pose[2].sin_cos();
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        matmul3(rz, matmul3(rx, ry))
    }

    /// Head-local point -> world.
    pub fn to_world(&self, q: Vec3) -> Vec3 {
        let r = self.rotation();
        let s = self.scale();
        std::array::from_fn(|i| s * (r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2]))
    }

    /// World point -> head-local (inverse rigid transform and scale).
    fn to_local(&self, p: Vec3) -> Vec3 {
        let r = self.rotation();
        let s = self.scale();
        std::array::from_fn(|i| (r[0][i] * p[0] + r[1][i] * p[1] + r[2][i] * p[2]) / s)
    }

    fn blobs(&self) -> Vec<Blob> {
        let id = &self.identity;
        let e = &self.expression;
        let skin = [0.85 + 0.12 * id[2], 0.65 + 0.12 * id[3], 0.5 + 0.12 * id[4]];
        let dark = [0.12, 0.08, 0.06];
        let eye_x = 0.2 * (1.0 + 0.2 * id[5]);
        let brow_y = 0.3 + 0.07 * e[1];
        let eye_open = 1.0 + 0.5 * e[3];
        let mut blobs = vec![Blob {
            centre: [0.0, 0.0, 0.0],
            axes: [0.55 * (1.0 + 0.15 * id[0]), 0.68 * (1.0 + 0.15 * id[1]), 0.5],
            amplitude: 30.0,
            color: skin,
        }];
        for side in [-1.0, 1.0] {
            blobs.push(Blob { centre: [side * eye_x, 0.12, 0.44], axes: [0.09, 0.055 * eye_open, 0.07], amplitude: 80.0, color: [0.05, 0.1, 0.3] });
            blobs.push(Blob { centre: [side * eye_x, brow_y, 0.43], axes: [0.12, 0.03, 0.07], amplitude: 80.0, color: dark });
        }
        blobs.push(Blob {
            centre: MOUTH_CENTRE,
            axes: [0.17 * (1.0 + 0.3 * e[2]), 0.045 * (1.0 + 0.8 * e[0]).max(0.2), 0.07],
            amplitude: 80.0,
            color: [0.75, 0.1, 0.15],
        });
        blobs
    }

    pub fn mouth_world(&self) -> Vec3 {
        self.to_world(MOUTH_CENTRE)
    }

    pub fn eyes_world(&self) -> [Vec3; 2] {
        let eye_x = 0.2 * (1.0 + 0.2 * self.identity[5]);
        [self.to_world([-eye_x, 0.12, 0.44]), self.to_world([eye_x, 0.12, 0.44])]
    }
}

const MOUTH_CENTRE: Vec3 = [0.0, -0.26, 0.42];

fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Gaussian falloff `amplitude * exp(-|(q - c) / axes|^2 * SHARPNESS)`.
struct Blob {
    centre: Vec3,
    axes: Vec3,
    amplitude: f64,
    color: [f64; 3],
}

const SHARPNESS: f64 = 3.0;

impl RadianceField for SceneParams {
    fn query(&self, p: Vec3) -> ([f64; 3], f64) {
        let q = self.to_local(p);
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for b in self.blobs() {
            let r2: f64 = (0..3).map(|k| ((q[k] - b.centre[k]) / b.axes[k]).powi(2)).sum();
            let s = b.amplitude * (-r2 * SHARPNESS).exp();
            sigma += s;
            for k in 0..3 {
                rgb[k] += s * b.color[k];
            }
        }
        if sigma > 0.0 {
            rgb = rgb.map(|c| c / sigma);
        }
        (rgb, sigma)
    }
}

/// Homogeneous slab `z0 <= z <= z1` of constant density and color.
#[derive(Clone, Copy, Debug)]
pub struct SlabField {
    pub z0: f64,
    pub z1: f64,
    pub sigma: f64,
    pub color: [f64; 3],
}

impl RadianceField for SlabField {
    fn query(&self, p: Vec3) -> ([f64; 3], f64) {
        if (self.z0..=self.z1).contains(&p[2]) {
            (self.color, self.sigma)
        } else {
            (self.color, 0.0)
        }
    }
}

/// Renders a field with `ORACLE_SAMPLE_FACTOR` times the configured samples.
pub fn oracle_render(field: &dyn RadianceField, cam: &Camera, cfg: &RenderConfig) -> Result<Tensor<f32>> {
    let fine = RenderConfig { samples_per_ray: cfg.samples_per_ray * ORACLE_SAMPLE_FACTOR, ..cfg.clone() };
    render_field(field, cam, &fine)
}

pub fn sample_identity(rng: &mut impl Rng) -> [f64; IDENTITY_DIMS] {
    std::array::from_fn(|_| rng.random_range(-1.0..1.0))
}

/// Smooth per-clip motion: sinusoids with random phase and frequency.
pub fn sample_trajectory(frames: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let amplitude = [0.8, 0.8, 0.6, 0.6, 0.3, 0.2, 0.12, 0.5];
    let waves: Vec<(f64, f64)> = (0..MOTION_DIMS).map(|_| (rng.random_range(0.5..1.5), rng.random_range(0.0..2.0 * PI))).collect();
    (0..frames)
        .map(|t| {
            let s = t as f64 / frames.max(1) as f64;
            waves.iter().zip(amplitude).map(|(&(f, ph), a)| a * (2.0 * PI * f * s + ph).sin()).collect()
        })
        .collect()
}

pub fn sample_camera(size: usize, rng: &mut impl Rng) -> Camera {
    let az = rng.random_range(-CAMERA_CAP..CAMERA_CAP);
    let el = rng.random_range(-CAMERA_CAP..CAMERA_CAP);
    Camera::orbit([0.0; 3], CAMERA_RADIUS, az, el, CAMERA_FOV, size, CAMERA_NEAR, CAMERA_FAR)
}

/// Mouth and eye boxes around projected centres, clamped to the image.
pub fn region_boxes(params: &SceneParams, cam: &Camera) -> Result<[RegionBox; 2]> {
    let px = |p: Vec3| -> Result<[f64; 2]> {
        let c = cam.project(p)?.ok_or_else(|| Error::InvalidArgument("feature behind the camera".into()))?;
        if !(0.0..=cam.width as f64).contains(&c[0]) || !(0.0..=cam.height as f64).contains(&c[1]) {
            return Err(Error::InvalidArgument(format!("feature projects outside the image at {c:?}")));
        }
        Ok(c)
    };
    let unit = cam.width as f64 / 32.0;
    let boxed = |c: [f64; 2], hw: f64, hh: f64| RegionBox {
        x0: (c[0] - hw).max(0.0),
        y0: (c[1] - hh).max(0.0),
        x1: (c[0] + hw).min(cam.width as f64),
        y1: (c[1] + hh).min(cam.height as f64),
    };
    let mouth = px(params.mouth_world())?;
    let [l, r] = params.eyes_world();
    let (l, r) = (px(l)?, px(r)?);
    let mid = [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0];
    let half_w = ((l[0] - r[0]).abs() / 2.0 + 2.0 * unit).max(2.0 * unit);
    let half_h = ((l[1] - r[1]).abs() / 2.0 + 2.0 * unit).max(2.0 * unit);
    Ok([boxed(mouth, 4.0 * unit, 2.5 * unit), boxed(mid, half_w, half_h)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub motion: Vec<f64>,
    pub camera: Camera,
    pub boxes: [RegionBox; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: usize,
    pub held_out: bool,
    pub identity: [f64; IDENTITY_DIMS],
    pub dir: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub render: RenderConfig,
    pub clips: Vec<ClipRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub identities: usize,
    pub frames: usize,
    pub image_size: usize,
    pub seed: u64,
    pub render: RenderConfig,
}

/// Number of identities kept out of training (the last quarter).
pub fn held_out_count(identities: usize) -> usize {
    identities / 4
}

fn camera_line(c: &Camera) -> String {
    let v = [
        c.position[0], c.position[1], c.position[2], c.look_at[0], c.look_at[1], c.look_at[2], c.up[0], c.up[1], c.up[2], c.fov_y,
        c.near, c.far,
    ];
    let mut s: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    s.push(c.height.to_string());
    s.push(c.width.to_string());
    s.join(" ")
}

/// Parses a camera file: per line position(3) look_at(3) up(3) fov near far height width.
pub fn parse_camera_text(text: &str) -> Result<Vec<Camera>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Vec<&str> = line.split_whitespace().collect();
        if v.len() != 14 {
            return Err(Error::Format(format!("camera line {} has {} fields, expected 14", i + 1, v.len())));
        }
        let f = |k: usize| v[k].parse::<f64>().map_err(|e| Error::Format(format!("camera line {}: {e}", i + 1)));
        let u = |k: usize| v[k].parse::<usize>().map_err(|e| Error::Format(format!("camera line {}: {e}", i + 1)));
        let cam = Camera {
            position: [f(0)?, f(1)?, f(2)?],
            look_at: [f(3)?, f(4)?, f(5)?],
            up: [f(6)?, f(7)?, f(8)?],
            fov_y: f(9)?,
            near: f(10)?,
            far: f(11)?,
            height: u(12)?,
            width: u(13)?,
        };
        cam.validate()?;
        out.push(cam);
    }
    Ok(out)
}

pub fn format_camera_text(cams: &[Camera]) -> String {
    cams.iter().map(|c| camera_line(c) + "\n").collect()
}

fn box_line(b: &[RegionBox; 2]) -> String {
    b.iter().flat_map(|r| [r.x0, r.y0, r.x1, r.y1]).map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

/// Renders every clip and writes images, motion/camera/box files and the manifest.
pub fn make_dataset(out: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    if spec.identities == 0 || spec.frames == 0 || spec.image_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "dataset needs positive identities, frames and image size, got {} / {} / {}",
            spec.identities, spec.frames, spec.image_size
        )));
    }
    spec.render.validate()?;
    std::fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let held = held_out_count(spec.identities);
    let mut plans = Vec::with_capacity(spec.identities);
    for id in 0..spec.identities {
        let identity = sample_identity(&mut rng);
        let motion = sample_trajectory(spec.frames, &mut rng);
        let cams: Vec<Camera> = (0..spec.frames).map(|_| sample_camera(spec.image_size, &mut rng)).collect();
        plans.push((id, identity, motion, cams));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(plans.len());
    let chunk = plans.len().div_ceil(workers);
    let clips = std::thread::scope(|s| {
        let handles: Vec<_> = plans
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(id, identity, motion, cams)| write_clip(out, spec, *id, *id >= spec.identities - held, identity, motion, cams))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("dataset worker panicked")).collect::<Result<Vec<_>>>()
    })?;
    let manifest = Manifest { seed: spec.seed, image_size: spec.image_size, render: spec.render.clone(), clips: clips.into_iter().flatten().collect() };
    write_atomic(&out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn write_clip(
    out: &Path,
    spec: &DatasetSpec,
    id: usize,
    held_out: bool,
    identity: &[f64; IDENTITY_DIMS],
    motion: &[Vec<f64>],
    cams: &[Camera],
) -> Result<ClipRecord> {
    let dir = format!("clip_{id:03}");
    let base = SceneParams::neutral(*identity);
    let mut frames = Vec::with_capacity(motion.len());
    for (t, (m, cam)) in motion.iter().zip(cams).enumerate() {
        let params = base.with_motion(m)?;
        let image = format!("{dir}/frame_{t:03}.ppm");
        write_ppm(&out.join(&image), &oracle_render(&params, cam, &spec.render)?)?;
        frames.push(FrameRecord { image, motion: m.clone(), camera: cam.clone(), boxes: region_boxes(&params, cam)? });
    }
    let clip_dir = out.join(&dir);
    write_atomic(&clip_dir.join("motion.txt"), format_motion_text(motion).as_bytes())?;
    write_atomic(&clip_dir.join("cameras.txt"), format_camera_text(cams).as_bytes())?;
    let boxes: String = frames.iter().map(|f| box_line(&f.boxes) + "\n").collect();
    write_atomic(&clip_dir.join("boxes.txt"), boxes.as_bytes())?;
    Ok(ClipRecord { id, held_out, identity: *identity, dir, frames })
}

/// A dataset frame loaded into memory.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Tensor<f32>,
    pub camera: Camera,
    pub boxes: [RegionBox; 2],
}

#[derive(Clone, Debug)]
pub struct Clip {
    pub id: usize,
    pub held_out: bool,
    pub identity: [f64; IDENTITY_DIMS],
    pub motion: Vec<Vec<f64>>,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(root.join(MANIFEST))
            .map_err(|e| Error::InvalidArgument(format!("cannot read dataset manifest in {}: {e}", root.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for rec in &manifest.clips {
            let motion = parse_motion_text(&std::fs::read_to_string(root.join(&rec.dir).join("motion.txt"))?)?;
            if motion.len() != rec.frames.len() {
                return Err(Error::Format(format!("clip {} has {} motion rows for {} frames", rec.id, motion.len(), rec.frames.len())));
            }
            let frames = rec
                .frames
                .iter()
                .map(|f| Ok(Frame { image: read_ppm(&root.join(&f.image))?, camera: f.camera.clone(), boxes: f.boxes }))
                .collect::<Result<Vec<_>>>()?;
            clips.push(Clip { id: rec.id, held_out: rec.held_out, identity: rec.identity, motion, frames });
        }
        Ok(Self { root: root.to_path_buf(), manifest, clips })
    }

    pub fn training_clips(&self) -> Vec<&Clip> {
        self.clips.iter().filter(|c| !c.held_out).collect()
    }

    pub fn held_out_clips(&self) -> Vec<&Clip> {
        self.clips.iter().filter(|c| c.held_out).collect()
    }
}
