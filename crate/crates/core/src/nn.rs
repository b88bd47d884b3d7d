//! Parameter containers shared by the trainable modules.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::engine::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// A module that owns an ordered list of named parameter tensors.
pub trait Params<R: Real> {
    fn named_params(&self) -> Vec<(String, &Tensor<R>)>;

    /// Same order as [`Params::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor<R>>;

    fn params(&self) -> Vec<&Tensor<R>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Overwrites parameters in order; shapes must match.
    fn load_params(&mut self, values: &[Tensor<R>]) -> Result<()> {
        let mut targets = self.params_mut();
        if targets.len() != values.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", targets.len(), values.len())));
        }
        for (t, v) in targets.iter_mut().zip(values) {
            if t.shape() != v.shape() {
                return Err(Error::Shape(format!("parameter {:?} vs value {:?}", t.shape(), v.shape())));
            }
            **t = v.clone();
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<Tensor<R>> {
        self.params().into_iter().cloned().collect()
    }
}

pub fn normal_tensor<R: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<R> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        R::of(z * std)
    })
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<R: Real = f32> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl<R: Real> Linear<R> {
    /// He-style init scaled for leaky-relu stacks, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: normal_tensor(&[input, output], (2.0 / input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> BoundLinear {
        BoundLinear { weight: g.leaf(self.weight.clone(), trainable), bias: g.leaf(self.bias.clone(), trainable) }
    }

    /// Plain forward for a single input vector.
    pub fn apply(&self, x: &[R]) -> Vec<R> {
        let out = self.output_dim();
        let mut y = self.bias.data().to_vec();
        for (&xv, wrow) in x.iter().zip(self.weight.data().chunks_exact(out)) {
            for (o, &w) in y.iter_mut().zip(wrow) {
                *o += xv * w;
            }
        }
        y
    }

    pub fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<R>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<R>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    /// Multiply-accumulate count per input row.
    pub fn macs(&self) -> usize {
        self.weight.numel()
    }
}

impl BoundLinear {
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

pub fn leaky<R: Real>(x: R, slope: f64) -> R {
    if x >= R::zero() {
        x
    } else {
        x * R::of(slope)
    }
}
