//! Plain slice kernels shared by forward and backward rules.

use super::tensor::Real;

/// `a[m,k] @ b[k,n]`
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av == R::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k]^T @ g[m,n]` -> `[k,n]`
pub fn matmul_at_b<R: Real>(a: &[R], g: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); k * n];
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            if av == R::zero() {
                continue;
            }
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `g[m,n] @ b[k,n]^T` -> `[m,k]`
pub fn matmul_a_bt<R: Real>(g: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    // Row-times-row dot products do not vectorize; the axpy form does.
    let mut bt = vec![R::zero(); n * k];
    for (r, brow) in b.chunks_exact(n).take(k).enumerate() {
        for (c, &v) in brow.iter().enumerate() {
            bt[c * k + r] = v;
        }
    }
    matmul(g, &bt, m, n, k)
}

/// Continuous texel coordinate with border clamping. Returns the lower
/// texel index, the fractional weight, and whether the coordinate was
/// clamped (which zeroes its derivative).
#[inline]
pub fn bilinear_axis<R: Real>(t: R, size: usize) -> (usize, R, bool) {
    let max = R::of((size - 1) as f64);
    let (t, clamped) = if t < R::zero() {
        (R::zero(), true)
    } else if t > max {
        (max, true)
    } else {
        (t, false)
    };
    let i0 = (t.floor().to_usize().unwrap_or(0)).min(size.saturating_sub(2));
    (i0, t - R::of(i0 as f64), clamped)
}

pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<R: Real>(x: R) -> R {
    if x > R::of(20.0) {
        x
    } else if x < R::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        let g: Vec<f64> = (0..m * n).map(|i| i as f64 - 4.0).collect();
        let atg = matmul_at_b(&a, &g, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * g[i * n + j]).sum();
                assert!((atg[p * n + j] - want).abs() < 1e-12);
            }
        }
        let gbt = matmul_a_bt(&g, &b, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| g[i * n + j] * b[p * n + j]).sum();
                assert!((gbt[i * k + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(100.0f32), 100.0);
        assert!(softplus(-100.0f32) >= 0.0);
    }
}
