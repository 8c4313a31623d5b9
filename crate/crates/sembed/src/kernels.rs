//! Dense matmul kernels shared by the forward ops and their backward rules.
//!
//! All variants accumulate into `out` (callers zero it first when needed) and
//! are written so the inner loop runs over contiguous rows, which lets the
//! compiler vectorize them. Parallelism splits output rows across threads;
//! each row is produced by one thread with a fixed arithmetic order, so the
//! results are bitwise identical regardless of thread count.

use crate::tensor::Scalar;
use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_MIN_WORK: usize = 1 << 16;

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_ab<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, orow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * n * k >= PAR_MIN_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T
pub fn matmul_abt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, orow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = *o + dot(arow, brow);
        }
    };
    if m * n * k >= PAR_MIN_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn matmul_atb<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    // Sequential over m: every output row receives contributions from all
    // input rows, so parallelizing here would need per-thread accumulators.
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Dot product with four-way unrolled accumulators; the fixed accumulation
/// order keeps results reproducible while still vectorizing.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn fill(len: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::rng::RngStream::new(seed, 0);
        (0..len).map(|_| r.next_f64() - 0.5).collect()
    }

    #[test]
    fn ab_matches_naive() {
        let (m, k, n) = (5, 7, 4);
        let a = fill(m * k, 1);
        let b = fill(k * n, 2);
        let mut out = vec![0.0; m * n];
        matmul_ab(&a, &b, &mut out, m, k, n);
        let expect = naive(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn abt_matches_naive_on_transposed_b() {
        let (m, k, n) = (3, 6, 5);
        let a = fill(m * k, 3);
        let bt = fill(n * k, 4); // stored as [n, k]
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                b[p * n + j] = bt[j * k + p];
            }
        }
        let mut out = vec![0.0; m * n];
        matmul_abt(&a, &bt, &mut out, m, k, n);
        let expect = naive(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn atb_matches_naive_on_transposed_a() {
        let (m, k, n) = (6, 3, 4);
        let a = fill(m * k, 5); // stored as [m, k]
        let b = fill(m * n, 6);
        let mut at = vec![0.0; k * m];
        for r in 0..m {
            for p in 0..k {
                at[p * m + r] = a[r * k + p];
            }
        }
        let mut out = vec![0.0; k * n];
        matmul_atb(&a, &b, &mut out, m, k, n);
        let expect = naive(&at, &b, k, m, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_threshold_does_not_change_results() {
        // Large enough to take the parallel path.
        let (m, k, n) = (64, 64, 64);
        let a = fill(m * k, 7);
        let b = fill(k * n, 8);
        let mut par = vec![0.0; m * n];
        matmul_ab(&a, &b, &mut par, m, k, n);
        let expect = naive(&a, &b, m, k, n);
        for (x, y) in par.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
