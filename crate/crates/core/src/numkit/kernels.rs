//! Raw row-major loops shared by the forward and backward passes.
//!
//! All reductions use a fixed accumulation order so results are
//! bit-reproducible across runs and threads.

use super::tensor::Real;

/// Large negative logit used for masked positions.
pub const MASK_NEG: f64 = -1e9;

/// Layer normalization variance floor.
pub const LN_EPS: f64 = 1e-5;

#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [R::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let x = &a[c * 8..c * 8 + 8];
        let y = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = R::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            axpy(aip, &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn matmul_nt_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_tn_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], brow, &mut out[p * n..(p + 1) * n]);
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row<R: Real>(x: &[R], out: &mut [R]) {
    let max = x.iter().copied().fold(R::neg_infinity(), R::max);
    let mut sum = R::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = R::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Vector-Jacobian product of a softmax row given its output `y`.
pub fn softmax_row_backward<R: Real>(y: &[R], dy: &[R], dx: &mut [R]) {
    let s = dot(y, dy);
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d += yv * (g - s);
    }
}

/// Normalizes a row to zero mean and unit variance; returns `1/sqrt(var+eps)`.
pub fn normalize_row<R: Real>(x: &[R], out: &mut [R]) -> R {
    let n = R::of(x.len() as f64);
    let mean = x.iter().copied().sum::<R>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
    let rstd = R::one() / (var + R::of(LN_EPS)).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * rstd;
    }
    rstd
}
