//! Dense row-major kernels behind the tape ops.
//!
//! Every kernel has a sequential implementation and, behind the `parallel`
//! feature, a rayon implementation that splits work over output rows. Each
//! output cell is always reduced by the same sequential inner loop, so the
//! parallel and sequential paths produce bit-identical results and runs stay
//! reproducible regardless of thread count.
//!
//! The `*_seq` / `*_par` pairs are public so the bench suite can compare the
//! two paths directly; library code goes through the dispatching entry
//! points, which fall back to sequential below [`PAR_FLOP_THRESHOLD`].

/// Minimum multiply-accumulate count before the parallel path is worth the
/// fork-join overhead. Measured on the bench suite; small graphs stay serial.
pub const PAR_FLOP_THRESHOLD: usize = 64 * 1024;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        return matmul_nn_par(a, b, m, k, n);
    }
    matmul_nn_seq(a, b, m, k, n)
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        return matmul_nt_par(a, b, m, k, n);
    }
    matmul_nt_seq(a, b, m, k, n)
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        return matmul_tn_par(a, b, m, k, n);
    }
    matmul_tn_seq(a, b, m, k, n)
}

/// D[m,c] with D[i][j] = euclidean distance between row i of A and row j of B.
pub fn pairwise_distance(a: &[f64], b: &[f64], m: usize, c: usize, d: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * c * d >= PAR_FLOP_THRESHOLD && m > 1 {
        return pairwise_distance_par(a, b, m, c, d);
    }
    pairwise_distance_seq(a, b, m, c, d)
}

fn matmul_nn_row(a_row: &[f64], b: &[f64], c_row: &mut [f64], k: usize, n: usize) {
    for (p, &av) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * n..(p + 1) * n];
        for (cv, &bv) in c_row.iter_mut().zip(b_row) {
            *cv += av * bv;
        }
    }
}

pub fn matmul_nn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        matmul_nn_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], k, n);
    }
    c
}

#[cfg(feature = "parallel")]
pub fn matmul_nn_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(c_row, a_row)| matmul_nn_row(a_row, b, c_row, k, n));
    c
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        s += a * b;
    }
    s
}

pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(c_row, a_row)| {
            for j in 0..n {
                c_row[j] = dot(a_row, &b[j * k..(j + 1) * k]);
            }
        });
    c
}

fn matmul_tn_row(a: &[f64], b: &[f64], c_row: &mut [f64], p: usize, m: usize, k: usize, n: usize) {
    for i in 0..m {
        let av = a[i * k + p];
        let b_row = &b[i * n..(i + 1) * n];
        for (cv, &bv) in c_row.iter_mut().zip(b_row) {
            *cv += av * bv;
        }
    }
}

pub fn matmul_tn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    for p in 0..k {
        matmul_tn_row(a, b, &mut c[p * n..(p + 1) * n], p, m, k, n);
    }
    c
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    c.par_chunks_mut(n)
        .enumerate()
        .for_each(|(p, c_row)| matmul_tn_row(a, b, c_row, p, m, k, n));
    c
}

fn pairwise_distance_row(a_row: &[f64], b: &[f64], d_row: &mut [f64], c: usize, d: usize) {
    for j in 0..c {
        let b_row = &b[j * d..(j + 1) * d];
        let mut s = 0.0;
        for (x, y) in a_row.iter().zip(b_row) {
            let t = x - y;
            s += t * t;
        }
        d_row[j] = s.sqrt();
    }
}

pub fn pairwise_distance_seq(a: &[f64], b: &[f64], m: usize, c: usize, d: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * d);
    debug_assert_eq!(b.len(), c * d);
    let mut out = vec![0.0; m * c];
    for i in 0..m {
        pairwise_distance_row(&a[i * d..(i + 1) * d], b, &mut out[i * c..(i + 1) * c], c, d);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn pairwise_distance_par(a: &[f64], b: &[f64], m: usize, c: usize, d: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * d);
    debug_assert_eq!(b.len(), c * d);
    let mut out = vec![0.0; m * c];
    out.par_chunks_mut(c)
        .zip(a.par_chunks(d))
        .for_each(|(d_row, a_row)| pairwise_distance_row(a_row, b, d_row, c, d));
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
