//! Row-major matrix kernels for the convolution and dense layers.
//!
//! Every loop accumulates in a fixed order so results are bit-reproducible
//! across runs and across the sequential/parallel front ends.

use crate::tensor::Scalar;

/// out[m x n] += a[m x k] * b[k x n]. `out` must be pre-initialized
/// (zeros, or a broadcast bias row).
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

/// out[k x n] += a^T * g where a is m x k and g is m x n.
pub(crate) fn matmul_at_b_acc<T: Scalar>(
    a: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += a_il * gv;
            }
        }
    }
}

/// Transpose a row-major r x c matrix into c x r.
pub(crate) fn transpose<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), r * c);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Dot product with four independent accumulators (fixed summation order).
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let p = i * 4;
        acc[0] += a[p] * b[p];
        acc[1] += a[p + 1] * b[p + 1];
        acc[2] += a[p + 2] * b[p + 2];
        acc[3] += a[p + 3] * b[p + 3];
    }
    let mut tail = T::zero();
    for p in chunks * 4..a.len() {
        tail += a[p] * b[p];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}
