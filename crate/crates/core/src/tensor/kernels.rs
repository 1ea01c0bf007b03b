//! Dense kernels on flat row-major slices.
//!
//! Output rows are written by exactly one task and every reduction runs in a
//! fixed order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

/// Inner product with eight independent accumulators.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (d, &s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, c): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], c);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, c): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, dst) in c.iter_mut().enumerate() {
            *dst += dot(ar, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |(p, o): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &g[i * n..(i + 1) * n], o);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}
