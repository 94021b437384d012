//! Matrix kernels shared by the tape ops.
//!
//! Every output element is accumulated in a fixed order by exactly one
//! worker, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_MIN_ROWS: usize = 64;

/// out[M,N] = a[M,K] · b[K,N]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n)
            .enumerate()
            .with_min_len(16)
            .for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// out[K,N] = a[M,K]ᵀ · g[M,N]
pub fn matmul_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    if n == 0 {
        return out;
    }
    let row = |(p, out_row): (usize, &mut [T])| {
        for i in 0..m {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += a_ip * gv;
            }
        }
    };
    if m * k >= PAR_MIN_ROWS * 8 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// out[M,K] = g[M,N] · b[K,N]ᵀ
pub fn matmul_nt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    if k == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [T])| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(k)
            .enumerate()
            .with_min_len(16)
            .for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}
