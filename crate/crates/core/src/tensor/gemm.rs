//! Dense f64 matrix products used by the convolution routines.
//!
//! All three entry points accumulate onto row-major buffers
//! (`C += A·B` variants) and lower onto `matrixmultiply::dgemm`, expressing
//! the transposed layouts purely through strides. For a fixed build and
//! fixed inputs the blocked kernel is deterministic, so results are
//! bit-reproducible run to run.

/// `C[m,n] += A[m,k] · B[k,n]`.
pub(crate) fn gemm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(c.len(), m * n);
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C[m,n] += A[m,k] · B[n,k]ᵀ` (B stored row-major as `[n,k]`).
pub(crate) fn gemm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(c.len(), m * n);
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C[m,n] += A[k,m]ᵀ · B[k,n]` (A stored row-major as `[k,m]`).
pub(crate) fn gemm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(c.len(), m * n);
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Fixed-association dot product with eight accumulators.
#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..(c + 1) * 8];
        let ys = &y[c * 8..(c + 1) * 8];
        for r in 0..8 {
            acc[r] += xs[r] * ys[r];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{gaussian_vec, rng_from_seed};

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for cc in 0..cols {
                t[cc * rows + r] = a[r * cols + cc];
            }
        }
        t
    }

    #[test]
    fn all_three_layouts_match_the_naive_product() {
        for (m, k, n) in [(1, 1, 1), (3, 5, 7), (4, 8, 16), (7, 13, 9), (12, 33, 20), (64, 256, 129)] {
            let mut rng = rng_from_seed((m * 100 + k * 10 + n) as u64);
            let a = gaussian_vec(&mut rng, m * k, 1.0);
            let b = gaussian_vec(&mut rng, k * n, 1.0);
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            gemm_nn(&mut c, &a, &b, m, k, n);
            let mut c_nt = vec![0.0; m * n];
            gemm_nt(&mut c_nt, &a, &transpose(&b, k, n), m, k, n);
            let mut c_tn = vec![0.0; m * n];
            gemm_tn(&mut c_tn, &transpose(&a, m, k), &b, m, k, n);

            for candidate in [&c, &c_nt, &c_tn] {
                for (got, w) in candidate.iter().zip(&want) {
                    assert!(
                        (got - w).abs() < 1e-10 * w.abs().max(1.0),
                        "({m},{k},{n}): {got} vs {w}"
                    );
                }
            }
        }
    }

    #[test]
    fn accumulation_adds_on_top_of_existing_values() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = vec![10.0];
        gemm_nn(&mut c, &a, &b, 1, 2, 1);
        assert_eq!(c[0], 10.0 + 11.0);
    }

    #[test]
    fn dot_matches_direct_summation() {
        let mut rng = rng_from_seed(77);
        for len in [0, 1, 7, 8, 9, 64, 100] {
            let x = gaussian_vec(&mut rng, len, 1.0);
            let y = gaussian_vec(&mut rng, len, 1.0);
            let want: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            assert!((dot(&x, &y) - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }
}
