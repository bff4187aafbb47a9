//! Dense kernels. All loops run in a fixed order so results are reproducible
//! bit for bit.

use crate::real::Real;

/// `out[m,n] = a[m,k] · b[k,n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            // Exact zeros (masked attention weights) contribute nothing.
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

/// `da[m,k] += g[m,n] · b[k,n]ᵀ`.
pub(crate) fn matmul_grad_a<T: Real>(
    g: &[T],
    b: &[T],
    da: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db[k,n] += a[m,k]ᵀ · g[m,n]`.
pub(crate) fn matmul_grad_b<T: Real>(
    a: &[T],
    g: &[T],
    db: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(av, grow, &mut db[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorize it; the combination order is fixed.
#[inline]
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += x[i] * y[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub(crate) fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
