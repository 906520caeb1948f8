//! Thin row-major wrappers over `matrixmultiply::sgemm`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Acc {
    Overwrite,
    Add,
}

impl Acc {
    fn beta(self) -> f32 {
        match self {
            Acc::Overwrite => 0.0,
            Acc::Add => 1.0,
        }
    }
}

/// `C (m x n) = A (m x k) * B (k x n)`.
pub(crate) fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, acc: Acc) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths are checked above and strides describe dense row-major storage.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            acc.beta(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C (m x n) = A^T * B` with `A` stored as `k x m`.
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, acc: Acc) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `matmul`; A is read through transposed strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            acc.beta(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C (m x n) = A * B^T` with `B` stored as `n x k`.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, acc: Acc) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `matmul`; B is read through transposed strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            acc.beta(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f32> = (0..m * k).map(|x| x as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|x| (x as f32).sin()).collect();
        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n, Acc::Overwrite);
        let mut naive = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-5);
        }

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_tn(&at, &b, &mut c2, m, k, n, Acc::Overwrite);
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![1.0; m * n];
        matmul_nt(&a, &bt, &mut c3, m, k, n, Acc::Add);
        for i in 0..m * n {
            assert!((c2[i] - naive[i]).abs() < 1e-5);
            assert!((c3[i] - naive[i] - 1.0).abs() < 1e-5);
        }
    }
}
