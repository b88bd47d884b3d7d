//! Differentiable ops recorded on a [`Graph`].

use super::graph::{BackwardCtx, Graph, Var};
use super::kernels::{self, bilinear_axis};
use super::tensor::{Real, Tensor};
use crate::{Error, Result};

type Grads<R> = Result<Vec<Option<Tensor<R>>>>;

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Sqrt,
    Abs,
    Square,
    LeakyRelu(f64),
    Softplus,
    Sigmoid,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
        }
    }

    fn apply<R: Real>(self, x: R) -> R {
        match self {
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::LeakyRelu(s) => {
                if x >= R::zero() {
                    x
                } else {
                    x * R::of(s)
                }
            }
            Unary::Softplus => kernels::softplus(x),
            Unary::Sigmoid => kernels::sigmoid(x),
        }
    }

    /// Derivative from input `x` and output `y`.
    fn derivative<R: Real>(self, x: R, y: R) -> R {
        match self {
            Unary::Exp => y,
            Unary::Sqrt => R::of(0.5) / y,
            Unary::Abs => {
                if x > R::zero() {
                    R::one()
                } else if x < R::zero() {
                    -R::one()
                } else {
                    R::zero()
                }
            }
            Unary::Square => R::of(2.0) * x,
            Unary::LeakyRelu(s) => {
                if x >= R::zero() {
                    R::one()
                } else {
                    R::of(s)
                }
            }
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Sigmoid => y * (R::one() - y),
        }
    }
}

impl<R: Real> Graph<R> {
    fn unary(&mut self, x: Var, op: Unary) -> Var {
        let value = self.value(x).map(|v| op.apply(v));
        self.record(
            op.name(),
            &[x],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let g = Tensor::new(
                    c.grad.shape(),
                    c.inputs[0]
                        .data()
                        .iter()
                        .zip(c.output.data())
                        .zip(c.grad.data())
                        .map(|((&x, &y), &g)| g * op.derivative(x, y))
                        .collect(),
                )?;
                Ok(vec![Some(g)])
            })),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = R::of(factor);
        let value = self.value(x).map(|v| v * f);
        self.record(
            "scale",
            &[x],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> { Ok(vec![Some(c.grad.map(|g| g * f))]) })),
        )
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let o = R::of(offset);
        let value = self.value(x).map(|v| v + o);
        self.record(
            "add_scalar",
            &[x],
            value,
            Some(Box::new(|c: &BackwardCtx<'_, R>| -> Grads<R> { Ok(vec![Some(c.grad.clone())]) })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|e| shape_err("add", e.to_string()))?;
        Ok(self.record(
            "add",
            &[a, b],
            value,
            Some(Box::new(|c: &BackwardCtx<'_, R>| -> Grads<R> {
                Ok(vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.clone())])
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y).map_err(|e| shape_err("sub", e.to_string()))?;
        Ok(self.record(
            "sub",
            &[a, b],
            value,
            Some(Box::new(|c: &BackwardCtx<'_, R>| -> Grads<R> {
                Ok(vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.map(|g| -g))])
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y).map_err(|e| shape_err("mul", e.to_string()))?;
        Ok(self.record(
            "mul",
            &[a, b],
            value,
            Some(Box::new(|c: &BackwardCtx<'_, R>| -> Grads<R> {
                let ga = if c.needs[0] { Some(c.grad.zip_map(c.inputs[1], |g, y| g * y)?) } else { None };
                let gb = if c.needs[1] { Some(c.grad.zip_map(c.inputs[0], |g, x| g * x)?) } else { None };
                Ok(vec![ga, gb])
            })),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y).map_err(|e| shape_err("div", e.to_string()))?;
        Ok(self.record(
            "div",
            &[a, b],
            value,
            Some(Box::new(|c: &BackwardCtx<'_, R>| -> Grads<R> {
                let ga = if c.needs[0] { Some(c.grad.zip_map(c.inputs[1], |g, y| g / y)?) } else { None };
                let gb = if c.needs[1] {
                    let gy = c.grad.zip_map(c.output, |g, q| g * q)?;
                    Some(gy.zip_map(c.inputs[1], |gq, y| -gq / y)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            })),
        ))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, multiply: bool) -> Result<Var> {
        let name = if multiply { "mul_row" } else { "add_row" };
        let cols = self.shape(row).iter().product::<usize>();
        let xs = self.value(x);
        if xs.shape().last() != Some(&cols) || self.value(row).rank() != 1 {
            return Err(shape_err(name, format!("cannot broadcast {:?} over {:?}", self.shape(row), xs.shape())));
        }
        let r = self.value(row).data();
        let mut out = xs.clone();
        for chunk in out.data_mut().chunks_exact_mut(cols) {
            for (o, &rv) in chunk.iter_mut().zip(r) {
                if multiply {
                    *o *= rv;
                } else {
                    *o += rv;
                }
            }
        }
        Ok(self.record(
            name,
            &[x, row],
            out,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let r = c.inputs[1].data();
                let gx = if !c.needs[0] {
                    None
                } else if multiply {
                    let mut g = c.grad.clone();
                    for chunk in g.data_mut().chunks_exact_mut(cols) {
                        for (gv, &rv) in chunk.iter_mut().zip(r) {
                            *gv *= rv;
                        }
                    }
                    Some(g)
                } else {
                    Some(c.grad.clone())
                };
                let grow = if c.needs[1] {
                    let mut acc = vec![R::zero(); cols];
                    if multiply {
                        for (gch, xch) in c.grad.data().chunks_exact(cols).zip(c.inputs[0].data().chunks_exact(cols)) {
                            for ((a, &g), &x) in acc.iter_mut().zip(gch).zip(xch) {
                                *a += g * x;
                            }
                        }
                    } else {
                        for gch in c.grad.data().chunks_exact(cols) {
                            for (a, &g) in acc.iter_mut().zip(gch) {
                                *a += g;
                            }
                        }
                    }
                    Some(Tensor::new(c.inputs[1].shape(), acc)?)
                } else {
                    None
                };
                Ok(vec![gx, grow])
            })),
        ))
    }

    /// Adds a vector along the last axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, false)
    }

    /// Multiplies by a vector along the last axis.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.record(
            "matmul",
            &[a, b],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let ga = if c.needs[0] {
                    Some(Tensor::new(&[m, k], kernels::matmul_a_bt(c.grad.data(), c.inputs[1].data(), m, k, n))?)
                } else {
                    None
                };
                let gb = if c.needs[1] {
                    Some(Tensor::new(&[k, n], kernels::matmul_at_b(c.inputs[0].data(), c.grad.data(), m, k, n))?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            })),
        ))
    }

    /// `x[n,in] @ w[in,out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(shape_err("linear", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = kernels::matmul(self.value(x).data(), self.value(w).data(), m, k, n);
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.record(
            "linear",
            &[x, w, b],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let g = c.grad.data();
                let gx = if c.needs[0] {
                    Some(Tensor::new(&[m, k], kernels::matmul_a_bt(g, c.inputs[1].data(), m, k, n))?)
                } else {
                    None
                };
                let gw = if c.needs[1] {
                    Some(Tensor::new(&[k, n], kernels::matmul_at_b(c.inputs[0].data(), g, m, k, n))?)
                } else {
                    None
                };
                let gb = if c.needs[2] {
                    let mut acc = vec![R::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Some(Tensor::new(&[n], acc)?)
                } else {
                    None
                };
                Ok(vec![gx, gw, gb])
            })),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("needs rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let t = transpose_data(self.value(x).data(), m, n);
        let value = Tensor::new(&[n, m], t)?;
        Ok(self.record(
            "transpose",
            &[x],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                Ok(vec![Some(Tensor::new(&[m, n], transpose_data(c.grad.data(), n, m))?)])
            })),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let original = self.shape(x).to_vec();
        Ok(self.record(
            "reshape",
            &[x],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                Ok(vec![Some(c.grad.clone().reshape(&original)?)])
            })),
        ))
    }

    /// Sum of all elements as a `[1]` tensor (accumulated in f64).
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(R::of(self.value(x).sum_f64()));
        self.record(
            "sum",
            &[x],
            value,
            Some(Box::new(|c: &BackwardCtx<'_, R>| -> Grads<R> {
                Ok(vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))])
            })),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the leading axis of `[n, c]`, giving `[c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(shape_err("mean_rows", format!("needs non-empty rank 2, got {s:?}")));
        }
        let (n, cols) = (s[0], s[1]);
        let mut acc = vec![R::zero(); cols];
        for row in self.value(x).data().chunks_exact(cols) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = R::of(1.0 / n as f64);
        let value = Tensor::new(&[cols], acc.into_iter().map(|a| a * inv).collect())?;
        Ok(self.record(
            "mean_rows",
            &[x],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let mut g = Vec::with_capacity(n * cols);
                for _ in 0..n {
                    g.extend(c.grad.data().iter().map(|&v| v * inv));
                }
                Ok(vec![Some(Tensor::new(&[n, cols], g)?)])
            })),
        ))
    }

    /// Repeats a `[d]` vector into `n` identical rows `[n, d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(shape_err("repeat_rows", format!("needs rank 1, got {s:?}")));
        }
        let d = s[0];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let value = Tensor::new(&[n, d], data)?;
        Ok(self.record(
            "repeat_rows",
            &[x],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let mut acc = vec![R::zero(); d];
                for row in c.grad.data().chunks_exact(d) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Ok(vec![Some(Tensor::new(&[d], acc)?)])
            })),
        ))
    }

    /// Row `i` of a `[n, d]` tensor as `[d]`.
    pub fn select_row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || i >= s[0] {
            return Err(shape_err("select_row", format!("row {i} of {s:?}")));
        }
        let d = s[1];
        let value = Tensor::new(&[d], self.value(x).row(i).to_vec())?;
        Ok(self.record(
            "select_row",
            &[x],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let mut g = Tensor::zeros(&s);
                g.data_mut()[i * d..(i + 1) * d].copy_from_slice(c.grad.data());
                Ok(vec![Some(g)])
            })),
        ))
    }

    /// Row-wise `x / sqrt(|x|^2 + eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let cols = *self.shape(x).last().ok_or_else(|| shape_err("l2_normalize", "empty shape".into()))?;
        let e = R::of(eps);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            let norm = (row.iter().map(|&v| v * v).sum::<R>() + e).sqrt();
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        Ok(self.record(
            "l2_normalize",
            &[x],
            out,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let mut g = c.grad.clone();
                for ((grow, yrow), xrow) in g
                    .data_mut()
                    .chunks_exact_mut(cols)
                    .zip(c.output.data().chunks_exact(cols))
                    .zip(c.inputs[0].data().chunks_exact(cols))
                {
                    let norm = (xrow.iter().map(|&v| v * v).sum::<R>() + e).sqrt();
                    let proj: R = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = (*gv - y * proj) / norm;
                    }
                }
                Ok(vec![Some(g)])
            })),
        ))
    }

    /// 1-D convolution over the leading (time) axis.
    /// `x[t, cin]`, `w[k, cin, cout]`, `b[cout]`; zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || sb != [sw[2]] || stride == 0 {
            return Err(shape_err("conv1d", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (t, cin, k, cout) = (sx[0], sx[1], sw[0], sw[2]);
        if t + 2 * pad < k {
            return Err(shape_err("conv1d", format!("window {t} too short for kernel {k}")));
        }
        let tout = (t + 2 * pad - k) / stride + 1;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![R::zero(); tout * cout];
        for (o, orow) in out.chunks_exact_mut(cout).enumerate() {
            orow.copy_from_slice(bd);
            for kk in 0..k {
                let Some(ti) = (o * stride + kk).checked_sub(pad).filter(|&ti| ti < t) else { continue };
                for ci in 0..cin {
                    let xv = xd[ti * cin + ci];
                    let wrow = &wd[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                    for (ov, &wv) in orow.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(&[tout, cout], out)?;
        Ok(self.record(
            "conv1d",
            &[x, w, b],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let (xd, wd, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut gx = vec![R::zero(); t * cin];
                let mut gw = vec![R::zero(); k * cin * cout];
                let mut gb = vec![R::zero(); cout];
                for (o, grow) in g.chunks_exact(cout).enumerate() {
                    for (a, &v) in gb.iter_mut().zip(grow) {
                        *a += v;
                    }
                    for kk in 0..k {
                        let Some(ti) = (o * stride + kk).checked_sub(pad).filter(|&ti| ti < t) else { continue };
                        for ci in 0..cin {
                            let widx = (kk * cin + ci) * cout;
                            let wrow = &wd[widx..widx + cout];
                            gx[ti * cin + ci] += grow.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<R>();
                            let xv = xd[ti * cin + ci];
                            for (gwv, &gv) in gw[widx..widx + cout].iter_mut().zip(grow) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
                Ok(vec![
                    c.needs[0].then(|| Tensor::new(&[t, cin], gx)).transpose()?,
                    c.needs[1].then(|| Tensor::new(&[k, cin, cout], gw)).transpose()?,
                    c.needs[2].then(|| Tensor::new(&[cout], gb)).transpose()?,
                ])
            })),
        ))
    }

    /// Same-size 2-D convolution with zero padding, odd square kernel.
    /// `x[h, w, cin]`, `k[ks, ks, cin, cout]`, `b[cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, b: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(b));
        if sx.len() != 3 || sk.len() != 4 || sk[0] != sk[1] || sk[0] % 2 == 0 || sk[2] != sx[2] || sb != [sk[3]] {
            return Err(shape_err("conv2d", format!("x {sx:?}, kernel {sk:?}, b {sb:?}")));
        }
        let geom = Conv2dGeom { h: sx[0], w: sx[1], cin: sx[2], ks: sk[0], cout: sk[3] };
        let out = geom.forward(self.value(x).data(), self.value(kernel).data(), self.value(b).data());
        let value = Tensor::new(&[geom.h, geom.w, geom.cout], out)?;
        Ok(self.record(
            "conv2d",
            &[x, kernel, b],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let (gx, gk, gb) = geom.backward(c.inputs[0].data(), c.inputs[1].data(), c.grad.data(), c.needs);
                Ok(vec![
                    gx.map(|g| Tensor::new(&[geom.h, geom.w, geom.cin], g)).transpose()?,
                    gk.map(|g| Tensor::new(&[geom.ks, geom.ks, geom.cin, geom.cout], g)).transpose()?,
                    gb.map(|g| Tensor::new(&[geom.cout], g)).transpose()?,
                ])
            })),
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[h, w, c]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2x", format!("needs rank 3, got {s:?}")));
        }
        let (h, w, ch) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![R::zero(); 4 * h * w * ch];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let from = ((y / 2) * w + xx / 2) * ch;
                let to = (y * 2 * w + xx) * ch;
                out[to..to + ch].copy_from_slice(&src[from..from + ch]);
            }
        }
        let value = Tensor::new(&[2 * h, 2 * w, ch], out)?;
        Ok(self.record(
            "upsample2x",
            &[x],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let g = c.grad.data();
                let mut gx = vec![R::zero(); h * w * ch];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let to = ((y / 2) * w + xx / 2) * ch;
                        let from = (y * 2 * w + xx) * ch;
                        for (a, &v) in gx[to..to + ch].iter_mut().zip(&g[from..from + ch]) {
                            *a += v;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(&[h, w, ch], gx)?)])
            })),
        ))
    }

    /// 2x2 average pooling of `[h, w, c]` (odd trailing row/column dropped).
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] < 2 || s[1] < 2 {
            return Err(shape_err("avg_pool2x", format!("needs rank 3 of at least 2x2, got {s:?}")));
        }
        let (h, w, ch) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = R::of(0.25);
        let mut out = vec![R::zero(); ho * wo * ch];
        for y in 0..ho {
            for xx in 0..wo {
                let o = (y * wo + xx) * ch;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * xx + dx) * ch;
                    for (a, &v) in out[o..o + ch].iter_mut().zip(&src[i..i + ch]) {
                        *a += v * quarter;
                    }
                }
            }
        }
        let value = Tensor::new(&[ho, wo, ch], out)?;
        Ok(self.record(
            "avg_pool2x",
            &[x],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let g = c.grad.data();
                let mut gx = vec![R::zero(); h * w * ch];
                for y in 0..ho {
                    for xx in 0..wo {
                        let o = (y * wo + xx) * ch;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((2 * y + dy) * w + 2 * xx + dx) * ch;
                            for (a, &v) in gx[i..i + ch].iter_mut().zip(&g[o..o + ch]) {
                                *a += v * quarter;
                            }
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(&[h, w, ch], gx)?)])
            })),
        ))
    }

    /// Bilinear sampling of `image[h, w, c]` at `coords[n, 2]` given as
    /// (column, row) in texel-centre index space, border clamped.
    pub fn grid_sample(&mut self, image: Var, coords: Var) -> Result<Var> {
        let (si, sc) = (self.shape(image).to_vec(), self.shape(coords).to_vec());
        if si.len() != 3 || si[0] < 2 || si[1] < 2 || sc.len() != 2 || sc[1] != 2 {
            return Err(shape_err("grid_sample", format!("image {si:?}, coords {sc:?}")));
        }
        let (h, w, ch, n) = (si[0], si[1], si[2], sc[0]);
        let (img, pts) = (self.value(image).data(), self.value(coords).data());
        let mut out = vec![R::zero(); n * ch];
        for (p, orow) in pts.chunks_exact(2).zip(out.chunks_exact_mut(ch)) {
            let (x0, fx, _) = bilinear_axis(p[0], w);
            let (y0, fy, _) = bilinear_axis(p[1], h);
            for (cy, wy) in [(0, R::one() - fy), (1, fy)] {
                for (cx, wx) in [(0, R::one() - fx), (1, fx)] {
                    let base = ((y0 + cy) * w + x0 + cx) * ch;
                    let wt = wy * wx;
                    for (o, &v) in orow.iter_mut().zip(&img[base..base + ch]) {
                        *o += wt * v;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, ch], out)?;
        Ok(self.record(
            "grid_sample",
            &[image, coords],
            value,
            Some(Box::new(move |c: &BackwardCtx<'_, R>| -> Grads<R> {
                let (img, pts, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut gimg = c.needs[0].then(|| vec![R::zero(); h * w * ch]);
                let mut gpts = c.needs[1].then(|| vec![R::zero(); n * 2]);
                for (i, (p, grow)) in pts.chunks_exact(2).zip(g.chunks_exact(ch)).enumerate() {
                    let (x0, fx, cx_clamped) = bilinear_axis(p[0], w);
                    let (y0, fy, cy_clamped) = bilinear_axis(p[1], h);
                    let texel = |yy: usize, xx: usize| &img[((y0 + yy) * w + x0 + xx) * ch..((y0 + yy) * w + x0 + xx + 1) * ch];
                    if let Some(gi) = gimg.as_mut() {
                        for (cy, wy) in [(0, R::one() - fy), (1, fy)] {
                            for (cx, wx) in [(0, R::one() - fx), (1, fx)] {
                                let base = ((y0 + cy) * w + x0 + cx) * ch;
                                let wt = wy * wx;
                                for (a, &gv) in gi[base..base + ch].iter_mut().zip(grow) {
                                    *a += wt * gv;
                                }
                            }
                        }
                    }
                    if let Some(gp) = gpts.as_mut() {
                        let dot = |a: &[R], b: &[R]| grow.iter().zip(a).zip(b).map(|((&g, &u), &v)| g * (v - u)).sum::<R>();
                        if !cx_clamped {
                            gp[2 * i] = (R::one() - fy) * dot(texel(0, 0), texel(0, 1)) + fy * dot(texel(1, 0), texel(1, 1));
                        }
                        if !cy_clamped {
                            gp[2 * i + 1] = (R::one() - fx) * dot(texel(0, 0), texel(1, 0)) + fx * dot(texel(0, 1), texel(1, 1));
                        }
                    }
                }
                Ok(vec![
                    gimg.map(|gi| Tensor::new(&[h, w, ch], gi)).transpose()?,
                    gpts.map(|gp| Tensor::new(&[n, 2], gp)).transpose()?,
                ])
            })),
        ))
    }
}

fn transpose_data<R: Real>(src: &[R], m: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

#[derive(Clone, Copy)]
struct Conv2dGeom {
    h: usize,
    w: usize,
    cin: usize,
    ks: usize,
    cout: usize,
}

impl Conv2dGeom {
    /// Input pixel under kernel tap `(ky, kx)` for output `(y, x)`.
    #[inline]
    fn tap(&self, y: usize, x: usize, ky: usize, kx: usize) -> Option<usize> {
        let half = self.ks / 2;
        let yy = (y + ky).checked_sub(half).filter(|&v| v < self.h)?;
        let xx = (x + kx).checked_sub(half).filter(|&v| v < self.w)?;
        Some(yy * self.w + xx)
    }

    fn forward<R: Real>(&self, x: &[R], k: &[R], b: &[R]) -> Vec<R> {
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![R::zero(); self.h * self.w * cout];
        for y in 0..self.h {
            for xx in 0..self.w {
                let orow = &mut out[(y * self.w + xx) * cout..(y * self.w + xx + 1) * cout];
                orow.copy_from_slice(b);
                for ky in 0..self.ks {
                    for kx in 0..self.ks {
                        let Some(pix) = self.tap(y, xx, ky, kx) else { continue };
                        let xin = &x[pix * cin..(pix + 1) * cin];
                        let kbase = (ky * self.ks + kx) * cin * cout;
                        for (ci, &xv) in xin.iter().enumerate() {
                            let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn backward<R: Real>(
        &self,
        x: &[R],
        k: &[R],
        g: &[R],
        needs: &[bool],
    ) -> (Option<Vec<R>>, Option<Vec<R>>, Option<Vec<R>>) {
        let (cin, cout) = (self.cin, self.cout);
        let mut gx = needs[0].then(|| vec![R::zero(); x.len()]);
        let mut gk = needs[1].then(|| vec![R::zero(); k.len()]);
        let mut gb = needs[2].then(|| vec![R::zero(); cout]);
        for y in 0..self.h {
            for xx in 0..self.w {
                let grow = &g[(y * self.w + xx) * cout..(y * self.w + xx + 1) * cout];
                if let Some(gb) = gb.as_mut() {
                    for (a, &v) in gb.iter_mut().zip(grow) {
                        *a += v;
                    }
                }
                for ky in 0..self.ks {
                    for kx in 0..self.ks {
                        let Some(pix) = self.tap(y, xx, ky, kx) else { continue };
                        let kbase = (ky * self.ks + kx) * cin * cout;
                        for ci in 0..cin {
                            let kidx = kbase + ci * cout;
                            if let Some(gx) = gx.as_mut() {
                                let krow = &k[kidx..kidx + cout];
                                gx[pix * cin + ci] += grow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<R>();
                            }
                            if let Some(gk) = gk.as_mut() {
                                let xv = x[pix * cin + ci];
                                for (a, &gv) in gk[kidx..kidx + cout].iter_mut().zip(grow) {
                                    *a += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gk, gb)
    }
}
