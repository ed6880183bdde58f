//! Row-major dense GEMM wrappers over `matrixmultiply`.

#[inline]
fn check(len: usize, need: usize, what: &str) {
    assert!(len >= need, "{what}: have {len} elements, need {need}");
}

/// `C[m,n] = beta C + A[m,k] B[k,n]`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    check(a.len(), m * k, "A");
    check(b.len(), k * n, "B");
    check(c.len(), m * n, "C");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds checked above, strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C[m,n] = beta C + A[m,k] Bᵀ` with `B` stored `[n,k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    check(a.len(), m * k, "A");
    check(b.len(), n * k, "B");
    check(c.len(), m * n, "C");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; B is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C[m,n] = beta C + Aᵀ B` with `A` stored `[k,m]` and `B` stored `[k,n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    check(a.len(), k * m, "A");
    check(b.len(), k * n, "B");
    check(c.len(), m * n, "C");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; A is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: impl Fn(usize, usize) -> f64, b: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a(i, p) * b(p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn all_variants_match_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, |i, p| a[i * k + p], |p, j| b[p * n + j]);

        let mut c = vec![f64::NAN; m * n];
        gemm_nn(m, k, n, &a, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }

        // Bᵀ stored as [n,k]
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![1.0; m * n];
        gemm_nt(m, k, n, &a, &bt, 1.0, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - 1.0 - y).abs() < 1e-14);
        }

        // Aᵀ stored as [k,m]
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c3 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, 0.0, &mut c3);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
