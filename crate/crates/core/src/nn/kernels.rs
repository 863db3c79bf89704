//! Dense kernels. Every reduction runs in a fixed order so results are
//! bitwise reproducible on one build.

use crate::scalar::Real;

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let chunks = n / 8;
    let mut acc = [T::zero(); 8];
    for c in 0..chunks {
        let o = c * 8;
        for l in 0..8 {
            acc[l] += a[o + l] * b[o + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

/// `c[n,m] = a[n,k] · b[k,m]`
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, &b[kk * m..(kk + 1) * m], crow);
            }
        }
    }
    c
}

/// `c[n,m] = a[n,k] · b[m,k]ᵀ`
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c[k,m] += a[n,k]ᵀ · g[n,m]`
pub fn matmul_at_acc<T: Real>(a: &[T], g: &[T], n: usize, k: usize, m: usize, c: &mut [T]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, grow, &mut c[kk * m..(kk + 1) * m]);
            }
        }
    }
}
