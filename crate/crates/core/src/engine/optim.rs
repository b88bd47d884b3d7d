use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<R: Real = f32> {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor<R>>,
    pub second_moment: Vec<Tensor<R>>,
    pub step_count: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<R>>) -> Self {
        let zeros: Vec<Tensor<R>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, first_moment: zeros.clone(), second_moment: zeros, step_count: 0 }
    }

    /// One in-place update. `params` and `grads` must line up with the
    /// tensors the state was created for.
    pub fn step(&mut self, params: &mut [&mut Tensor<R>], grads: &[Tensor<R>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (R::of(beta1), R::of(beta2));
        let (one_b1, one_b2) = (R::of(1.0 - beta1), R::of(1.0 - beta2));
        let step_size = R::of(lr / bc1);
        let inv_sqrt_bc2 = R::of(1.0 / bc2.sqrt());
        let eps = R::of(eps);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Exponential-moving-average shadow of a parameter list.
#[derive(Clone, Debug)]
pub struct EmaState<R: Real = f32> {
    pub shadow: Vec<Tensor<R>>,
    pub beta: f64,
}

impl<R: Real> EmaState<R> {
    pub fn new(shadow: Vec<Tensor<R>>, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self { shadow, beta })
    }

    /// `shadow <- beta * shadow + (1 - beta) * live`, evaluated as
    /// `shadow + (1 - beta) * (live - shadow)` so that `live == shadow` is an
    /// exact fixed point.
    pub fn update<'a>(&mut self, live: impl IntoIterator<Item = &'a Tensor<R>>) -> Result<()> {
        check_beta(self.beta)?;
        let live: Vec<&Tensor<R>> = live.into_iter().collect();
        if live.len() != self.shadow.len() {
            return Err(Error::Shape(format!("ema: {} live tensors, {} tracked", live.len(), self.shadow.len())));
        }
        for (s, l) in self.shadow.iter().zip(&live) {
            if s.shape() != l.shape() {
                return Err(Error::Shape(format!("ema: shadow {:?} vs live {:?}", s.shape(), l.shape())));
            }
        }
        let one_b = R::of(1.0 - self.beta);
        for (s, l) in self.shadow.iter_mut().zip(live) {
            for (sv, &lv) in s.data_mut().iter_mut().zip(l.data()) {
                *sv += one_b * (lv - *sv);
            }
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Config(format!("ema beta must lie in (0, 1), got {beta}")));
    }
    Ok(())
}
