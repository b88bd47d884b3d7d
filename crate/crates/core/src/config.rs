//! Run configuration: flat `section.key=value` text over built-in desk
//! defaults, with the same keys accepted as command-line overrides.

use std::path::{Path, PathBuf};

use crate::controller::ControllerConfig;
use crate::generator::GeneratorConfig;
use crate::losses::{LossConfig, RegularizerTarget};
use crate::renderer::RenderConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub codebook: usize,
    pub resolution: usize,
    pub plane_channels: usize,
    pub generator_channels: usize,
    pub decoder_hidden: usize,
    pub mlp_width: usize,
    pub expression_dims: usize,
    pub pose_dims: usize,
    pub window: usize,
    pub extent: f64,
    pub average_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            layers: 6,
            codebook: 8,
            resolution: 32,
            plane_channels: 8,
            generator_channels: 16,
            decoder_hidden: 32,
            mlp_width: 128,
            expression_dims: 4,
            pose_dims: 4,
            window: 5,
            extent: 1.0,
            average_samples: 10_000,
        }
    }
}

impl ModelConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: self.latent_dim,
            layers: self.layers,
            channels: self.generator_channels,
            resolution: self.resolution,
            plane_channels: self.plane_channels,
            extent: self.extent,
        }
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig {
            coeff_dims: self.expression_dims + self.pose_dims,
            expression_dims: self.expression_dims,
            window: self.window,
            latent_dim: self.latent_dim,
            layers: self.layers,
            codebook_size: self.codebook,
            mlp_width: self.mlp_width,
        }
    }

    pub fn window_radius(&self) -> usize {
        self.window / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_id: usize,
    pub n_mo: usize,
    pub iterations: usize,
    pub lr_latent: f64,
    pub lr_nets: f64,
    pub lr_finetune: f64,
    pub ema_beta: f64,
    pub batch: usize,
    pub joint: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_id: 90,
            n_mo: 10,
            iterations: 200,
            lr_latent: 0.01,
            lr_nets: 1e-4,
            lr_finetune: 1e-4,
            ema_beta: 0.99,
            batch: 4,
            joint: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps(&self) -> usize {
        self.n_id + self.n_mo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertConfig {
    /// Steps per phase (W, then W+).
    pub steps: usize,
    pub lr: f64,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self { steps: 100, lr: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub identities: usize,
    pub frames: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { identities: 8, frames: 16, image_size: 32, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data/synthetic".into(),
            checkpoint: "runs/model.ota".into(),
            log: "runs/train.jsonl".into(),
            output: "runs/out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub invert: InvertConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            render: RenderConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            invert: InvertConfig::default(),
            data: DataConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let l = &mut self.loss;
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "model.latent_dim" => m.latent_dim = parse(key, v)?,
            "model.layers" => m.layers = parse(key, v)?,
            "model.codebook" => m.codebook = parse(key, v)?,
            "model.resolution" => m.resolution = parse(key, v)?,
            "model.plane_channels" => m.plane_channels = parse(key, v)?,
            "model.generator_channels" => m.generator_channels = parse(key, v)?,
            "model.decoder_hidden" => m.decoder_hidden = parse(key, v)?,
            "model.mlp_width" => m.mlp_width = parse(key, v)?,
            "model.expression_dims" => m.expression_dims = parse(key, v)?,
            "model.pose_dims" => m.pose_dims = parse(key, v)?,
            "model.window" => m.window = parse(key, v)?,
            "model.extent" => m.extent = parse(key, v)?,
            "model.average_samples" => m.average_samples = parse(key, v)?,
            "renderer.samples" => self.render.samples_per_ray = parse(key, v)?,
            "renderer.jitter" => self.render.stratified_jitter = parse(key, v)?,
            "renderer.seed" => self.render.seed = parse(key, v)?,
            "renderer.background" => {
                let parts = v.split(',').map(|p| parse::<f64>(key, p.trim())).collect::<Result<Vec<_>>>()?;
                self.render.background =
                    parts.try_into().map_err(|_| Error::Config(format!("{key} needs three comma-separated values")))?;
            }
            "loss.perceptual" => l.weights.perceptual = parse(key, v)?,
            "loss.style" => l.weights.style = parse(key, v)?,
            "loss.region" => l.weights.region = parse(key, v)?,
            "loss.identity" => l.weights.identity = parse(key, v)?,
            "loss.tv" => l.weights.tv = parse(key, v)?,
            "loss.regularizer" => l.weights.regularizer = parse(key, v)?,
            "loss.levels" => l.levels = parse(key, v)?,
            "loss.filters" => l.filters = parse(key, v)?,
            "loss.patch" => l.patch = parse(key, v)?,
            "loss.smoothness_samples" => l.smoothness_samples = parse(key, v)?,
            "loss.extractor_seed" => l.extractor_seed = parse(key, v)?,
            "loss.regularize" => {
                l.regularizer_target = match v {
                    "motion_code" => RegularizerTarget::MotionCode,
                    "controller_params" => RegularizerTarget::ControllerParams,
                    _ => return Err(Error::Config(format!("{key}: expected motion_code or controller_params, got {v}"))),
                }
            }
            "train.n_id" => t.n_id = parse(key, v)?,
            "train.n_mo" => t.n_mo = parse(key, v)?,
            "train.iterations" => t.iterations = parse(key, v)?,
            "train.lr_latent" => t.lr_latent = parse(key, v)?,
            "train.lr_nets" => t.lr_nets = parse(key, v)?,
            "train.lr_finetune" => t.lr_finetune = parse(key, v)?,
            "train.ema_beta" => t.ema_beta = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.joint" => t.joint = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "invert.steps" => self.invert.steps = parse(key, v)?,
            "invert.lr" => self.invert.lr = parse(key, v)?,
            "data.identities" => self.data.identities = parse(key, v)?,
            "data.frames" => self.data.frames = parse(key, v)?,
            "data.image_size" => self.data.image_size = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "paths.dataset" => self.paths.dataset = v.into(),
            "paths.checkpoint" => self.paths.checkpoint = v.into(),
            "paths.log" => self.paths.log = v.into(),
            "paths.output" => self.paths.output = v.into(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let dims = [
            ("model.latent_dim", m.latent_dim),
            ("model.layers", m.layers),
            ("model.codebook", m.codebook),
            ("model.resolution", m.resolution),
            ("model.plane_channels", m.plane_channels),
            ("model.generator_channels", m.generator_channels),
            ("model.decoder_hidden", m.decoder_hidden),
            ("model.mlp_width", m.mlp_width),
            ("model.expression_dims", m.expression_dims),
            ("model.window", m.window),
            ("model.average_samples", m.average_samples),
            ("train.batch", self.train.batch),
            ("data.identities", self.data.identities),
            ("data.frames", self.data.frames),
            ("data.image_size", self.data.image_size),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if m.window % 2 == 0 {
            return Err(Error::Config(format!("model.window must be odd, got {}", m.window)));
        }
        if m.codebook > m.latent_dim {
            return Err(Error::Config(format!("model.codebook ({}) cannot exceed model.latent_dim ({})", m.codebook, m.latent_dim)));
        }
        if !(m.extent > 0.0) {
            return Err(Error::Config("model.extent must be positive".into()));
        }
        m.generator().upsample_stages()?;
        self.render.validate()?;
        self.loss.weights.validate()?;
        if self.train.steps() == 0 {
            return Err(Error::Config("train.n_id + train.n_mo must be positive".into()));
        }
        if !(self.train.ema_beta > 0.0 && self.train.ema_beta < 1.0) {
            return Err(Error::Config(format!("train.ema_beta must lie in (0, 1), got {}", self.train.ema_beta)));
        }
        Ok(())
    }
}
