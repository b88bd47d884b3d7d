//! Decoupling by inverting: controller training that alternates identity
//! latent inversion with controller updates, one-shot identity inversion
//! (W then W+), and animation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{InvertConfig, TrainConfig};
use crate::controller::MotionSignal;
use crate::engine::{checksum, AdamConfig, AdamState, EmaState, Graph, Real, Tensor, Var};
use crate::generator::LatentCodePlus;
use crate::losses::{
    density_smoothness, motion_code_regularizer, parameter_regularizer, total_variation, AnimationLoss, LossTerms, RegionBox,
    RegularizerTarget,
};
use crate::model::{BoundModel, Model};
use crate::nn::Params;
use crate::renderer::{Camera, RenderConfig};
use crate::synthetic::Dataset;
use crate::{Error, Result};

/// One frame as the trainer sees it.
#[derive(Clone, Debug)]
pub struct FrameSample<R: Real = f32> {
    pub image: Tensor<R>,
    pub motion: MotionSignal<R>,
    pub camera: Camera,
    pub boxes: Vec<RegionBox>,
}

/// Source and driving frames from one clip.
#[derive(Clone, Debug)]
pub struct FramePair<R: Real = f32> {
    pub source: FrameSample<R>,
    pub driving: FrameSample<R>,
}

impl FrameSample<f32> {
    pub fn from_dataset(data: &Dataset, clip: usize, frame: usize, window: usize) -> Result<Self> {
        let c = data.clips.get(clip).ok_or_else(|| Error::InvalidArgument(format!("no clip {clip}")))?;
        let f = c.frames.get(frame).ok_or_else(|| Error::InvalidArgument(format!("clip {clip} has no frame {frame}")))?;
        let motion = MotionSignal::from_sequence(&c.motion, frame, window / 2, crate::synthetic::EXPRESSION_DIMS)?;
        Ok(Self { image: f.image.clone(), motion, camera: f.camera.clone(), boxes: f.boxes.to_vec() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Id,
    Mo,
    Joint,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub w_id: u64,
    pub controller: u64,
    pub generator: u64,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        iter: usize,
        step: usize,
        phase: Phase,
        loss: LossTerms,
        checksums: Checksums,
        /// Largest `|<b_i, b_j>|` of the codebook after the step.
        codebook_dot: f64,
    },
    Ema { iter: usize, beta: f64, shadow_before: u64, live: u64, shadow_after: u64 },
}

/// Receives training events. Both hooks default to no-ops.
pub trait TrainObserver {
    fn record(&mut self, _rec: &LogRecord) -> Result<()> {
        Ok(())
    }

    /// Controller parameters before the EMA update, the live values folded
    /// in, and the updated shadow.
    fn ema(&mut self, _old: &[Tensor<f32>], _live: &[Tensor<f32>], _new: &[Tensor<f32>]) {}
}

impl TrainObserver for () {}

/// Writes each record as one JSON line.
pub struct JsonLinesLog<W: Write>(pub W);

impl<W: Write> TrainObserver for JsonLinesLog<W> {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, rec)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

/// Loss of one frame rendered from `id_code + C(x)`: the image terms plus
/// tri-plane and motion regularizers.
#[allow(clippy::too_many_arguments)]
pub fn frame_loss<R: Real>(
    g: &mut Graph<R>,
    model: &Model<R>,
    loss: &AnimationLoss<R>,
    bound: &BoundModel,
    id_code: Var,
    frame: &FrameSample<R>,
    render: &RenderConfig,
    seed: u64,
) -> Result<(Var, LossTerms)> {
    let x = g.constant(frame.motion.tensor().clone());
    let w_x = model.controller.forward(g, &bound.controller, x)?;
    let code = g.add(id_code, w_x)?;
    let (image, planes) = model.render_graph(g, bound, code, &frame.camera, render)?;
    let target = g.constant(frame.image.clone());
    let mut terms = loss.image_terms(g, target, image, &frame.boxes)?;
    terms.tv = Some(total_variation(g, planes)?);
    if loss.config.smoothness_samples > 0 {
        terms.smoothness = Some(density_smoothness(
            g,
            planes,
            model.config.extent,
            &model.decoder,
            &bound.decoder,
            loss.config.smoothness_samples,
            seed,
        )?);
    }
    terms.regularizer = Some(match loss.config.regularizer_target {
        RegularizerTarget::MotionCode => motion_code_regularizer(g, w_x),
        RegularizerTarget::ControllerParams => parameter_regularizer(g, &bound.controller.vars())?,
    });
    loss.combine(g, &terms)
}

/// `L_s + L_d` with one identity code shared by both frames.
#[allow(clippy::too_many_arguments)]
pub fn dual_objective<R: Real>(
    g: &mut Graph<R>,
    model: &Model<R>,
    loss: &AnimationLoss<R>,
    bound: &BoundModel,
    id_code: Var,
    pair: &FramePair<R>,
    render: &RenderConfig,
    seed: u64,
) -> Result<(Var, LossTerms)> {
    let (ls, mut ts) = frame_loss(g, model, loss, bound, id_code, &pair.source, render, seed)?;
    let (ld, td) = frame_loss(g, model, loss, bound, id_code, &pair.driving, render, seed.wrapping_add(1))?;
    ts += td;
    Ok((g.add(ls, ld)?, ts))
}

#[derive(Clone, Debug)]
pub struct IterationSummary {
    pub iter: usize,
    pub first: LossTerms,
    pub last: LossTerms,
    pub finetune: LossTerms,
}

struct Evaluation {
    terms: LossTerms,
    latent: Option<Vec<Tensor<f32>>>,
    controller: Option<Vec<Tensor<f32>>>,
    eg: Option<Vec<Tensor<f32>>>,
}

/// Owns all trainable state: the model, the controller EMA shadow, and the
/// optimizer moments that persist across iterations.
pub struct Trainer {
    pub model: Model<f32>,
    pub loss: AnimationLoss<f32>,
    pub train: TrainConfig,
    pub render: RenderConfig,
    ema: EmaState<f32>,
    controller_adam: AdamState<f32>,
    eg_adam: AdamState<f32>,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, loss: AnimationLoss<f32>, train: TrainConfig, render: RenderConfig) -> Result<Self> {
        if train.steps() == 0 || train.batch == 0 {
            return Err(Error::Config("training needs at least one step and a positive batch".into()));
        }
        let ema = EmaState::new(model.controller.snapshot(), train.ema_beta)?;
        let controller_adam = AdamState::new(AdamConfig::with_lr(train.lr_nets), model.controller.params());
        let eg_adam = AdamState::new(AdamConfig::with_lr(train.lr_finetune), model.eg_snapshot().iter());
        let rng = ChaCha8Rng::seed_from_u64(train.seed);
        Ok(Self { model, loss, train, render, ema, controller_adam, eg_adam, rng, iteration: 0 })
    }

    pub fn shadow(&self) -> &[Tensor<f32>] {
        &self.ema.shadow
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn phase(&self, step: usize) -> Phase {
        if self.train.joint {
            Phase::Joint
        } else if step <= self.train.n_id {
            Phase::Id
        } else {
            Phase::Mo
        }
    }

    /// A batch of (source, driving) pairs, each from a random training clip.
    pub fn sample_pairs(&mut self, data: &Dataset) -> Result<Vec<FramePair>> {
        let clips: Vec<usize> = data.clips.iter().enumerate().filter(|(_, c)| !c.held_out && !c.frames.is_empty()).map(|(i, _)| i).collect();
        if clips.is_empty() {
            return Err(Error::InvalidArgument("dataset has no training frames".into()));
        }
        let window = self.model.config.window;
        (0..self.train.batch)
            .map(|_| {
                let clip = clips[self.rng.random_range(0..clips.len())];
                let n = data.clips[clip].frames.len();
                let s = self.rng.random_range(0..n);
                let d = if n > 1 { (s + self.rng.random_range(1..n)) % n } else { s };
                Ok(FramePair {
                    source: FrameSample::from_dataset(data, clip, s, window)?,
                    driving: FrameSample::from_dataset(data, clip, d, window)?,
                })
            })
            .collect()
    }

    fn evaluate(&self, pairs: &[FramePair], w_ids: &[Tensor<f32>], phase: Phase, seed: u64) -> Result<Evaluation> {
        let train_w = matches!(phase, Phase::Id | Phase::Joint);
        let train_c = matches!(phase, Phase::Mo | Phase::Joint);
        let train_eg = phase == Phase::Finetune;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, train_eg, train_c);
        let w_vars: Vec<Var> = w_ids.iter().map(|w| g.leaf(w.clone(), train_w)).collect();
        let mut total: Option<Var> = None;
        let mut terms = LossTerms::default();
        for (b, (pair, &w)) in pairs.iter().zip(&w_vars).enumerate() {
            let code = g.repeat_rows(w, self.model.config.layers)?;
            let (l, t) = dual_objective(&mut g, &self.model, &self.loss, &bound, code, pair, &self.render, seed.wrapping_add(2 * b as u64))?;
            terms += t;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let inv = 1.0 / pairs.len() as f64;
        let total = g.scale(total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?, inv);
        let mut grads = g.backward(total)?;
        Ok(Evaluation {
            terms: terms.scaled(inv),
            latent: train_w.then(|| w_vars.iter().map(|&v| grads.take(v)).collect()),
            controller: train_c.then(|| bound.controller.vars().into_iter().map(|v| grads.take(v)).collect()),
            eg: train_eg.then(|| bound.eg_vars().into_iter().map(|v| grads.take(v)).collect()),
        })
    }

    fn checksums(&self, w_ids: &[Tensor<f32>]) -> Checksums {
        Checksums { w_id: checksum(w_ids), controller: self.model.controller_checksum(), generator: self.model.generator_checksum() }
    }

    /// One outer iteration: fresh identity codes, `n_id` latent steps,
    /// `n_mo` controller steps (or joint steps), one generator/decoder
    /// finetune step, then the EMA update.
    pub fn run_iteration(&mut self, data: &Dataset, obs: &mut dyn TrainObserver) -> Result<IterationSummary> {
        let iter = self.iteration;
        let pairs = self.sample_pairs(data)?;
        self.model.controller.load_params(&self.ema.shadow)?;
        self.model.controller.codebook.maintain()?;
        let mut w_ids = vec![self.model.w_avg.0.clone(); pairs.len()];
        let mut latent_adam = AdamState::new(AdamConfig::with_lr(self.train.lr_latent), &w_ids);
        let seed_base = self.train.seed.wrapping_mul(1_000_003).wrapping_add(iter as u64 * 4096);
        let mut first = None;
        let mut last = LossTerms::default();
        for step in 1..=self.train.steps() {
            let phase = self.phase(step);
            let eval = self.evaluate(&pairs, &w_ids, phase, seed_base + step as u64 * 16)?;
            if let Some(gw) = eval.latent {
                latent_adam.step(&mut w_ids.iter_mut().collect::<Vec<_>>(), &gw)?;
            }
            if let Some(gc) = eval.controller {
                self.controller_adam.step(&mut self.model.controller.params_mut(), &gc)?;
                self.model.controller.codebook.maintain()?;
            }
            first.get_or_insert(eval.terms);
            last = eval.terms;
            obs.record(&LogRecord::Step {
                iter,
                step,
                phase,
                loss: eval.terms,
                checksums: self.checksums(&w_ids),
                codebook_dot: self.model.controller.codebook.max_off_diagonal(),
            })?;
        }
        let eval = self.evaluate(&pairs, &w_ids, Phase::Finetune, seed_base + 8)?;
        let grads = eval.eg.expect("finetune produces generator gradients");
        self.eg_adam.step(&mut self.model.eg_params_mut(), &grads)?;
        obs.record(&LogRecord::Step {
            iter,
            step: self.train.steps() + 1,
            phase: Phase::Finetune,
            loss: eval.terms,
            checksums: self.checksums(&w_ids),
            codebook_dot: self.model.controller.codebook.max_off_diagonal(),
        })?;

        let old = self.ema.shadow.clone();
        let live = self.model.controller.snapshot();
        self.ema.update(&live)?;
        obs.ema(&old, &live, &self.ema.shadow);
        obs.record(&LogRecord::Ema {
            iter,
            beta: self.ema.beta,
            shadow_before: checksum(&old),
            live: checksum(&live),
            shadow_after: checksum(&self.ema.shadow),
        })?;
        self.iteration += 1;
        Ok(IterationSummary { iter, first: first.unwrap_or_default(), last, finetune: eval.terms })
    }

    pub fn train(&mut self, data: &Dataset, obs: &mut dyn TrainObserver) -> Result<Vec<IterationSummary>> {
        if data.training_clips().is_empty() {
            return Err(Error::InvalidArgument("dataset has no training clips".into()));
        }
        (0..self.train.iterations).map(|_| self.run_iteration(data, obs)).collect()
    }

    /// The trained model with the (orthogonalized) EMA controller.
    pub fn into_model(mut self) -> Result<Model<f32>> {
        self.model.controller.load_params(&self.ema.shadow)?;
        self.model.controller.codebook.maintain()?;
        Ok(self.model)
    }
}

#[derive(Clone, Debug)]
pub struct Inversion<R: Real = f32> {
    pub code: LatentCodePlus<R>,
    /// Loss before every update, followed by the loss of the final code.
    pub losses: Vec<f64>,
}

impl<R: Real> Inversion<R> {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one evaluation")
    }
}

/// Image loss of `R(G(code + w_x), camera)` against the reference and its
/// gradient with respect to `param`, which is either `[d]` (repeated to all
/// rows) or `[L, d]`.
fn reference_loss<R: Real>(
    model: &Model<R>,
    loss: &AnimationLoss<R>,
    reference: &FrameSample<R>,
    w_x: &LatentCodePlus<R>,
    param: &Tensor<R>,
    render: &RenderConfig,
    want_grad: bool,
) -> Result<(f64, Option<Tensor<R>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false, false);
    let p = g.leaf(param.clone(), want_grad);
    let code = if param.rank() == 1 { g.repeat_rows(p, model.config.layers)? } else { p };
    let wx = g.constant(w_x.tensor().clone());
    let code = g.add(code, wx)?;
    let (image, _) = model.render_graph(&mut g, &bound, code, &reference.camera, render)?;
    let target = g.constant(reference.image.clone());
    let terms = loss.image_terms(&mut g, target, image, &reference.boxes)?;
    let (total, log) = loss.combine(&mut g, &terms)?;
    let grad = if want_grad { Some(g.backward(total)?.take(p)) } else { None };
    Ok((log.total, grad))
}

/// One-shot identity inversion: `steps` Adam steps on a W code started at
/// the average latent, then `steps` more on its per-row W+ extension. The
/// controller and generator are only read.
pub fn invert_identity<R: Real>(
    model: &Model<R>,
    loss: &AnimationLoss<R>,
    reference: &FrameSample<R>,
    render: &RenderConfig,
    cfg: &InvertConfig,
) -> Result<Inversion<R>> {
    let w_x = model.motion_code(&reference.motion)?;
    let mut losses = Vec::with_capacity(2 * cfg.steps + 1);
    let mut w = model.w_avg.0.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), [&w]);
    for _ in 0..cfg.steps {
        let (l, grad) = reference_loss(model, loss, reference, &w_x, &w, render, true)?;
        losses.push(l);
        adam.step(&mut [&mut w], &[grad.expect("requested")])?;
    }
    let mut wp = crate::generator::LatentCode(w).extend_to_wplus(model.config.layers).0;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), [&wp]);
    for _ in 0..cfg.steps {
        let (l, grad) = reference_loss(model, loss, reference, &w_x, &wp, render, true)?;
        losses.push(l);
        adam.step(&mut [&mut wp], &[grad.expect("requested")])?;
    }
    let (l, _) = reference_loss(model, loss, reference, &w_x, &wp, render, false)?;
    losses.push(l);
    Ok(Inversion { code: LatentCodePlus::new(wp)?, losses })
}

/// `10 log10(1 / mse)` for images in `[0, 1]`.
pub fn psnr<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("psnr of {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / a.numel().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn mean_abs_diff<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("l1 of {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).abs()).sum::<f64>() / a.numel().max(1) as f64)
}
