//! Raw slice kernels shared by the tape ops and their backward rules.

use super::Real;

/// `c[m×n] = a[m×p] · b[p×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, p: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// `c[m×p] = g[m×n] · b[p×n]ᵀ`.
pub(crate) fn matmul_nt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for k in 0..p {
            let brow = &b[k * n..(k + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * p + k] = acc;
        }
    }
    c
}

/// `c[p×n] = a[m×p]ᵀ · g[m×n]`.
pub(crate) fn matmul_tn<T: Real>(a: &[T], g: &[T], m: usize, p: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); p * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let crow = &mut c[k * n..(k + 1) * n];
            for (cj, &gj) in crow.iter_mut().zip(grow) {
                *cj += aik * gj;
            }
        }
    }
    c
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn normal_cdf<T: Real>(x: T) -> T {
    T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    normal_cdf(x) + x * pdf
}
