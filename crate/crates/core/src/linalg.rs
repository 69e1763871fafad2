//! Matrix kernels shared by the forward and backward passes.
//!
//! Each kernel has a sequential implementation and, under the `parallel`
//! feature, a rayon row-parallel wrapper. Rows are independent outputs
//! and the per-row reduction order is identical in both paths, so the
//! parallel results are bitwise equal to the sequential ones.

use crate::tensor::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this output-times-inner size the rayon dispatch overhead
/// dominates and the sequential kernel runs directly.
const PAR_THRESHOLD: usize = 1 << 16;

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_THRESHOLD && m > 1 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                matmul_row(&a[i * k..(i + 1) * k], b, row, n);
            });
            return;
        }
    }
    matmul_acc_seq(a, b, out, m, k, n);
}

/// Sequential form of [`matmul_acc`], always available for comparison.
pub fn matmul_acc_seq<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], n);
    }
}

#[inline]
fn matmul_row<E: Scalar>(a_row: &[E], b: &[E], out_row: &mut [E], n: usize) {
    for (kk, &aik) in a_row.iter().enumerate() {
        let b_row = &b[kk * n..(kk + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += aik * bv;
        }
    }
}

/// out[m,k] += go[m,n] * b[k,n]^T  (rows of `out` are dot products of
/// contiguous rows, the gradient of matmul w.r.t. its left operand)
pub fn matmul_acc_bt<E: Scalar>(go: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(go.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_THRESHOLD && m > 1 {
            out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
                bt_row(&go[i * n..(i + 1) * n], b, row, k, n);
            });
            return;
        }
    }
    for i in 0..m {
        bt_row(&go[i * n..(i + 1) * n], b, &mut out[i * k..(i + 1) * k], k, n);
    }
}

#[inline]
fn bt_row<E: Scalar>(go_row: &[E], b: &[E], out_row: &mut [E], k: usize, n: usize) {
    for (kk, o) in out_row.iter_mut().enumerate().take(k) {
        let b_row = &b[kk * n..(kk + 1) * n];
        let mut acc = E::ZERO;
        for (&g, &bv) in go_row.iter().zip(b_row) {
            acc += g * bv;
        }
        *o += acc;
    }
}

/// out[k,n] += a[m,k]^T * go[m,n]  (the gradient of matmul w.r.t. its
/// right operand)
pub fn matmul_acc_at<E: Scalar>(a: &[E], go: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(go.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_THRESHOLD && k > 1 {
            out.par_chunks_mut(n).enumerate().for_each(|(kk, row)| {
                at_row(a, go, row, kk, m, k, n);
            });
            return;
        }
    }
    for kk in 0..k {
        at_row(a, go, &mut out[kk * n..(kk + 1) * n], kk, m, k, n);
    }
}

#[inline]
fn at_row<E: Scalar>(a: &[E], go: &[E], out_row: &mut [E], kk: usize, m: usize, k: usize, n: usize) {
    for i in 0..m {
        let aik = a[i * k + kk];
        let go_row = &go[i * n..(i + 1) * n];
        for (o, &g) in out_row.iter_mut().zip(go_row) {
            *o += aik * g;
        }
    }
}
