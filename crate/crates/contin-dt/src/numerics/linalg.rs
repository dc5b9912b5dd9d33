//! Raw matrix kernels shared by the f32 forward/backward passes and the
//! f64 replay path used for gradient verification.

/// Scalar abstraction so each kernel is written once for f32 and f64.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn max(self, other: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f32(v: f32) -> f32 {
        v
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn tanh(self) -> f32 {
        f32::tanh(self)
    }
    fn max(self, other: f32) -> f32 {
        f32::max(self, other)
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f32(v: f32) -> f64 {
        v as f64
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn max(self, other: f64) -> f64 {
        f64::max(self, other)
    }
}

/// C[m,n] += A[m,k] * B[k,n]; ikj loop order so the inner loop is a saxpy.
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * *bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T; both operands are walked row-wise.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n].
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * *bv;
            }
        }
    }
}

/// Dot product with four independent accumulators; the fixed association
/// order keeps results reproducible while still vectorizing.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let base = i * 4;
        for lane in 0..4 {
            acc[lane] = acc[lane] + a[base + lane] * b[base + lane];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_matches_by_hand() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        gemm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_variants_agree() {
        let m = 3;
        let k = 5;
        let n = 4;
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32) * 0.3 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32) * 0.1 - 0.7).collect();
        let mut c_nn = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c_nn, m, k, n);

        // B^T stored row-major is [n,k]; gemm_nt(A, B^T) must equal A*B.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c_nt = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c_nt, m, k, n);
        for (x, y) in c_nn.iter().zip(&c_nt) {
            assert!((x - y).abs() < 1e-5);
        }

        // gemm_tn computes A^T * B2 for A[m,k] and B2[m,n]: result [k,n].
        let b2: Vec<f32> = (0..m * n).map(|i| (i as f32) * 0.2 - 0.5).collect();
        let mut c_tn = vec![0.0; k * n];
        gemm_tn(&a, &b2, &mut c_tn, m, k, n);
        // Oracle: plain gemm_nn on the materialized transpose A^T [k,m].
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c_ref = vec![0.0; k * n];
        gemm_nn(&at, &b2, &mut c_ref, k, m, n);
        for (x, y) in c_tn.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
