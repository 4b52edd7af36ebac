//! Raw matmul kernels.
//!
//! All three contraction layouts accumulate into `out` so backward passes
//! can reuse them. Each output row is produced by a single sequential loop
//! in a fixed order, so results are bit-identical whether or not the
//! row-parallel path is taken.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-accumulates the parallel path is not worth
/// the fork overhead.
#[cfg(feature = "parallel")]
const PAR_MIN_MACS: usize = 1 << 22;

/// out[m,n] += a[m,k] · b[k,n]
pub fn matmul_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);

    let row = |orow: &mut [f64], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };

    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_MACS && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(orow, i));
        return;
    }

    for (i, orow) in out.chunks_mut(n).enumerate() {
        row(orow, i);
    }
}

/// out[m,k] += a[m,n] · b[k,n]ᵀ  (contracts the trailing axes)
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);

    let row = |orow: &mut [f64], i: usize| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            // Four-lane reduction; the lane layout is fixed, so results
            // are deterministic run to run.
            let mut acc = [0.0f64; 4];
            let mut chunks_a = arow.chunks_exact(4);
            let mut chunks_b = brow.chunks_exact(4);
            for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
                acc[0] += ca[0] * cb[0];
                acc[1] += ca[1] * cb[1];
                acc[2] += ca[2] * cb[2];
                acc[3] += ca[3] * cb[3];
            }
            let mut tail = 0.0;
            for (&av, &bv) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
                tail += av * bv;
            }
            *o += ((acc[0] + acc[2]) + (acc[1] + acc[3])) + tail;
        }
    };

    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_MACS && m > 1 {
        out.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, orow)| row(orow, i));
        return;
    }

    for (i, orow) in out.chunks_mut(k).enumerate() {
        row(orow, i);
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]  (contracts the leading axes)
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);

    // Sequential outer loop over m keeps each out row accumulated in the
    // same order regardless of blocking.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn arange(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64) * 0.37 - 1.1).collect()
    }

    #[test]
    fn nn_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a = arange(m * k);
        let b = arange(k * n);
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(&a, &b, m, k, n, &mut out);
        let expect = naive_nn(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nt_equals_nn_with_transposed_rhs() {
        let (m, n, k) = (4, 6, 5);
        let a = arange(m * n);
        let b = arange(k * n); // interpreted as k x n, transposed in the product
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut out = vec![0.0; m * k];
        matmul_nt_acc(&a, &b, m, n, k, &mut out);
        let expect = naive_nn(&a, &bt, m, n, k);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tn_equals_nn_with_transposed_lhs() {
        let (m, k, n) = (6, 4, 3);
        let a = arange(m * k);
        let b = arange(m * n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut out = vec![0.0; k * n];
        matmul_tn_acc(&a, &b, m, k, n, &mut out);
        let expect = naive_nn(&at, &b, k, m, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
