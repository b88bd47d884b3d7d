//! The assembled avatar model: generator, decoder, motion controller and
//! the average latent, with checkpoint I/O and forward-only animation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::controller::{BoundController, ControllerNet, MotionSignal};
use crate::engine::{checksum, Graph, Real, Tensor, Var};
use crate::generator::{average_latent, BoundGenerator, GeneratorNet, LatentCode, LatentCodePlus};
use crate::nn::Params;
use crate::renderer::{render, render_graph, Camera, RenderConfig};
use crate::triplane::{BoundDecoder, FeatureDecoder, TriPlaneVolume};
use crate::{Error, Result};

/// All model parameters recorded on one graph.
pub struct BoundModel {
    pub generator: BoundGenerator,
    pub decoder: BoundDecoder,
    pub controller: BoundController,
}

impl BoundModel {
    /// Generator then decoder vars, in `Params` order.
    pub fn eg_vars(&self) -> Vec<Var> {
        let mut v = self.generator.vars();
        v.extend(self.decoder.vars());
        v
    }
}

#[derive(Clone, Debug)]
pub struct Model<R: Real = f32> {
    pub config: ModelConfig,
    pub generator: GeneratorNet<R>,
    pub decoder: FeatureDecoder<R>,
    pub controller: ControllerNet<R>,
    pub w_avg: LatentCode<R>,
}

impl<R: Real> Model<R> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let generator = GeneratorNet::init(config.generator(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let decoder = FeatureDecoder::init(config.plane_channels, config.decoder_hidden, &mut rng);
        let controller = ControllerNet::init(config.controller(), seed.wrapping_add(2))?;
        let w_avg = average_latent(config.latent_dim, config.average_samples, seed.wrapping_add(3))?;
        Ok(Self { config: config.clone(), generator, decoder, controller, w_avg })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (prefix, params) in [
            ("generator.", self.generator.named_params()),
            ("decoder.", self.decoder.named_params()),
            ("controller.", self.controller.named_params()),
        ] {
            for (name, t) in params {
                ck.push(format!("{prefix}{name}"), t);
            }
        }
        ck.push("w_avg", &self.w_avg.0);
        ck
    }

    /// Rebuilds a model of shape `config` from checkpoint tensors.
    pub fn from_checkpoint(config: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        fn load<R: Real>(p: &mut dyn Params<R>, prefix: &str, ck: &Checkpoint) -> Result<()> {
            let names: Vec<String> = p.named_params().into_iter().map(|(n, _)| n).collect();
            let values = names.iter().map(|n| ck.require(&format!("{prefix}{n}"))).collect::<Result<Vec<_>>>()?;
            p.load_params(&values)
        }
        load(&mut model.generator, "generator.", ck)?;
        load(&mut model.decoder, "decoder.", ck)?;
        load(&mut model.controller, "controller.", ck)?;
        let w_avg: Tensor<R> = ck.require("w_avg")?;
        if w_avg.shape() != [config.latent_dim] {
            return Err(Error::Shape(format!("w_avg has shape {:?}, config needs [{}]", w_avg.shape(), config.latent_dim)));
        }
        model.w_avg = LatentCode(w_avg);
        Ok(model)
    }

    pub fn bind(&self, g: &mut Graph<R>, train_eg: bool, train_controller: bool) -> BoundModel {
        BoundModel {
            generator: self.generator.bind(g, train_eg),
            decoder: self.decoder.bind(g, train_eg),
            controller: self.controller.bind(g, train_controller),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint(config, &Checkpoint::load(path)?)
    }

    pub fn w_avg_plus(&self) -> LatentCodePlus<R> {
        self.w_avg.extend_to_wplus(self.config.layers)
    }

    pub fn motion_code(&self, signal: &MotionSignal<R>) -> Result<LatentCodePlus<R>> {
        self.controller.motion_code(signal)
    }

    pub fn volume(&self, code: &LatentCodePlus<R>) -> Result<TriPlaneVolume<R>> {
        self.generator.generate_triplane(code)
    }

    /// `R(G(w_id + C(x)), camera)`.
    pub fn animate(&self, w_id: &LatentCodePlus<R>, motion: &MotionSignal<R>, cam: &Camera, cfg: &RenderConfig) -> Result<Tensor<R>> {
        let w_x = self.motion_code(motion)?;
        self.render_code(&add_codes(w_id, &w_x)?, cam, cfg)
    }

    pub fn render_code(&self, code: &LatentCodePlus<R>, cam: &Camera, cfg: &RenderConfig) -> Result<Tensor<R>> {
        render(&self.volume(code)?, &self.decoder, cam, cfg)
    }

    /// Differentiable `code[L, d] -> image[H, W, 3]` (also returns the planes).
    pub fn render_graph(&self, g: &mut Graph<R>, bound: &BoundModel, code: Var, cam: &Camera, cfg: &RenderConfig) -> Result<(Var, Var)> {
        let planes = self.generator.forward(g, &bound.generator, code)?;
        let image = render_graph(g, planes, self.config.extent, &self.decoder, &bound.decoder, cam, cfg)?;
        Ok((image, planes))
    }

    pub fn generator_checksum(&self) -> u64 {
        checksum(self.generator.params().into_iter().chain(self.decoder.params()))
    }

    pub fn eg_params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.generator.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn eg_snapshot(&self) -> Vec<Tensor<R>> {
        let mut v = self.generator.snapshot();
        v.extend(self.decoder.snapshot());
        v
    }

    pub fn controller_checksum(&self) -> u64 {
        checksum(self.controller.params())
    }
}

pub fn add_codes<R: Real>(a: &LatentCodePlus<R>, b: &LatentCodePlus<R>) -> Result<LatentCodePlus<R>> {
    LatentCodePlus::new(a.0.zip_map(&b.0, |x, y| x + y)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { resolution: 16, layers: 3, average_samples: 16, ..ModelConfig::default() }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = Model::<f32>::init(&small(), 5).unwrap();
        let back = Model::<f32>::from_checkpoint(&small(), &Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.generator_checksum(), m.generator_checksum());
        assert_eq!(back.controller_checksum(), m.controller_checksum());
        assert_eq!(back.w_avg, m.w_avg);
        let wrong = ModelConfig { latent_dim: 16, ..small() };
        assert!(Model::<f32>::from_checkpoint(&wrong, &m.to_checkpoint()).is_err());
    }

    #[test]
    fn animate_is_deterministic() {
        let m = Model::<f32>::init(&small(), 1).unwrap();
        let x = MotionSignal::new(Tensor::from_fn(&[5, 8], |i| (i as f32 * 0.1).cos()), 4).unwrap();
        let cam = Camera::orbit([0.0; 3], 2.5, 0.3, 0.1, 0.7, 6, 1.3, 3.7);
        let cfg = RenderConfig { samples_per_ray: 8, ..Default::default() };
        let a = m.animate(&m.w_avg_plus(), &x, &cam, &cfg).unwrap();
        assert_eq!(a, m.animate(&m.w_avg_plus(), &x, &cam, &cfg).unwrap());
        assert_eq!(a.shape(), &[6, 6, 3]);
    }
}
