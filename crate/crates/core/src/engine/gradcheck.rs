//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Norm-wise relative tolerance between analytic and numeric gradients.
    pub rel_tol: f64,
    /// Relative step: `h = step * max(1, |x|)`.
    pub step: f64,
    /// At most this many coordinates per input are perturbed.
    pub max_coords: usize,
    pub seed: u64,
}

impl GradCheckConfig {
    /// Tolerances for the element type: 1e-3 for f32, 1e-6 for f64.
    pub fn for_type<R: Real>() -> Self {
        if std::mem::size_of::<R>() == 4 {
            Self { rel_tol: 1e-3, step: 1e-3, max_coords: 48, seed: 0 }
        } else {
            Self { rel_tol: 1e-6, step: 1e-5, max_coords: 48, seed: 0 }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Builds the graph with `f` on leaves holding `inputs`, contracts the
/// output with fixed random weights, and compares the analytic gradient
/// of every input with central differences.
pub fn check_gradients<R: Real>(
    name: &str,
    inputs: &[Tensor<R>],
    f: &dyn Fn(&mut Graph<R>, &[Var]) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    check_gradients_against(name, inputs, f, None, cfg)
}

/// Like [`check_gradients`], but the central differences are taken on
/// `reference`, the same function built in f64, at the exact values of
/// `inputs`. Keeps the f32 check from measuring f32 rounding in the
/// perturbed forward passes instead of errors in the backward rules.
pub fn check_gradients_against<R: Real>(
    name: &str,
    inputs: &[Tensor<R>],
    f: &dyn Fn(&mut Graph<R>, &[Var]) -> Result<Var>,
    reference: Option<&dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut g = Graph::<R>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let weights: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wt = g.constant(Tensor::from_f64(g.shape(out), &weights)?);
    let contracted = g.mul(out, wt)?;
    let loss = g.sum(contracted);
    let grads = g.backward(loss)?;

    fn eval<S: Real>(f: &dyn Fn(&mut Graph<S>, &[Var]) -> Result<Var>, inputs: &[Tensor<S>], weights: &[f64]) -> Result<f64> {
        let mut g = Graph::<S>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(weights).map(|(v, w)| v.f64() * w).sum())
    }

    let (mut diff2, mut ana2, mut num2, mut coords) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    let mut work: Vec<Tensor<R>> = inputs.to_vec();
    let mut work64: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        let n = inputs[i].numel();
        let picks: Vec<usize> =
            if n <= cfg.max_coords { (0..n).collect() } else { sample(&mut rng, n, cfg.max_coords).into_vec() };
        for j in picks {
            let x = inputs[i].data()[j];
            let h = R::of(cfg.step * x.f64().abs().max(1.0));
            // Use the step actually representable in R.
            let (hi, lo) = ((x + h).f64(), (x - h).f64());
            let (plus, minus) = match reference {
                Some(rf) => {
                    work64[i].data_mut()[j] = hi;
                    let plus = eval(rf, &work64, &weights)?;
                    work64[i].data_mut()[j] = lo;
                    let minus = eval(rf, &work64, &weights)?;
                    work64[i].data_mut()[j] = x.f64();
                    (plus, minus)
                }
                None => {
                    work[i].data_mut()[j] = x + h;
                    let plus = eval(f, &work, &weights)?;
                    work[i].data_mut()[j] = x - h;
                    let minus = eval(f, &work, &weights)?;
                    work[i].data_mut()[j] = x;
                    (plus, minus)
                }
            };
            let numeric = (plus - minus) / (hi - lo).max(f64::MIN_POSITIVE);
            let a = analytic.data()[j].f64();
            diff2 += (a - numeric).powi(2);
            ana2 += a * a;
            num2 += numeric * numeric;
            coords += 1;
        }
    }
    let scale = ana2.sqrt().max(num2.sqrt());
    let rel_error = if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale };
    Ok(GradCheckReport { name: name.to_string(), rel_error, coords_checked: coords, passed: rel_error <= cfg.rel_tol })
}
