//! Dense real linear algebra.
//!
//! Everything is row-major and generic over [`Real`] so the same code runs in
//! 32-bit (the default training precision) and 64-bit (oracle mode).
//! Matrix products accumulate in a fixed left-to-right order, which makes a
//! pipelined run and a single-process run of the same computation agree
//! bitwise.

mod decomp;
mod matrix;
mod tensor;

pub use decomp::{
    qr_thin, singular_values, stable_rank, symmetric_eigen, symmetric_eigenvalues, SymmetricEigen,
};
pub use matrix::Matrix;
pub use tensor::Tensor3;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating point scalar used by matrices and tensors.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Size of one scalar on the wire and in checkpoints.
    const BYTES: usize;

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real is representable as f64")
    }
}

impl Real for f32 {
    const BYTES: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`, accumulating over `k` in order.
/// Sums run in f64 and round once per entry, so a product of `f32` factors
/// stays in the row space of `b` to `f32` precision.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    let wide: Vec<f64> = b.iter().map(|v| v.as_f64()).collect();
    let mut acc = vec![0.0f64; 4 * n];
    let mut a_blocks = a.chunks_exact(4 * k);
    let mut out_blocks = out.chunks_exact_mut(4 * n);
    for (a4, out4) in (&mut a_blocks).zip(&mut out_blocks) {
        for (s, o) in acc.iter_mut().zip(out4.iter()) {
            *s = o.as_f64();
        }
        let (o0, rest) = acc.split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for (p, b_row) in wide.chunks_exact(n).enumerate() {
            let (a0, a1, a2, a3) = (
                a4[p].as_f64(),
                a4[k + p].as_f64(),
                a4[2 * k + p].as_f64(),
                a4[3 * k + p].as_f64(),
            );
            for j in 0..n {
                let bv = b_row[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        for (o, s) in out4.iter_mut().zip(&acc) {
            *o = T::of(*s);
        }
    }
    let row = &mut acc[..n];
    for (a_row, out_row) in a_blocks
        .remainder()
        .chunks_exact(k)
        .zip(out_blocks.into_remainder().chunks_exact_mut(n))
    {
        for (s, o) in row.iter_mut().zip(out_row.iter()) {
            *s = o.as_f64();
        }
        for (&av, b_row) in a_row.iter().zip(wide.chunks_exact(n)) {
            let av = av.as_f64();
            for (s, &bv) in row.iter_mut().zip(b_row) {
                *s += av * bv;
            }
        }
        for (o, s) in out_row.iter_mut().zip(row.iter()) {
            *o = T::of(*s);
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`, accumulating over `m` in order.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if n == 0 || k == 0 {
        return;
    }
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m x n] = a[m x k] * b[n x k]^T`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k)) {
            *o = dot(a_row, b_row);
        }
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let len = a.len().min(b.len());
    let (a, b) = (&a[..len], &b[..len]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    let mut acc = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        acc = acc + x * y;
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    acc + ((pairs[0] + pairs[2]) + (pairs[1] + pairs[3]))
}

/// In-place row-wise softmax with max subtraction. Entries equal to negative
/// infinity (masked positions) come out as exact zeros.
pub fn softmax_rows_in_place<T: Real>(data: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    let mut out = a.clone();
    softmax_rows_in_place(out.data_mut(), a.cols());
    out
}

/// Elementwise `max(x, 0)`.
pub fn relu<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}
