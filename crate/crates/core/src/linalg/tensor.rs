use super::{gemm_acc, gemm_nt, gemm_tn_acc, Matrix, Real};
use crate::error::{Error, Result};

/// Batched activations laid out `[batch][seq][dim]`, row-major.
///
/// Most operations treat the tensor as a `(batch * seq) x dim` matrix; the
/// conversions to and from [`Matrix`] move the buffer without copying.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T: Real = f32> {
    b: usize,
    n: usize,
    d: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(b: usize, n: usize, d: usize) -> Self {
        Self {
            b,
            n,
            d,
            data: vec![T::zero(); b * n * d],
        }
    }

    pub fn from_vec(b: usize, n: usize, d: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != b * n * d {
            return Err(Error::shape(format!(
                "{} values cannot fill a {b}x{n}x{d} tensor",
                data.len()
            )));
        }
        Ok(Self { b, n, d, data })
    }

    /// Reinterprets a `(b * n) x d` matrix as a tensor.
    pub fn from_matrix(m: Matrix<T>, b: usize, n: usize) -> Result<Self> {
        if m.rows() != b * n {
            return Err(Error::shape(format!(
                "{} rows do not split into batch {b} x seq {n}",
                m.rows()
            )));
        }
        let d = m.cols();
        Ok(Self {
            b,
            n,
            d,
            data: m.into_data(),
        })
    }

    pub fn into_matrix(self) -> Matrix<T> {
        Matrix::from_vec(self.b * self.n, self.d, self.data).expect("tensor buffer is consistent")
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        self.clone().into_matrix()
    }

    pub fn batch(&self) -> usize {
        self.b
    }

    pub fn seq(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.b, self.n, self.d)
    }

    /// Number of `d`-wide rows, `b * n`.
    pub fn row_count(&self) -> usize {
        self.b * self.n
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row for batch element `bi`, position `pos`.
    pub fn vector(&self, bi: usize, pos: usize) -> &[T] {
        let start = (bi * self.n + pos) * self.d;
        &self.data[start..start + self.d]
    }

    pub fn vector_mut(&mut self, bi: usize, pos: usize) -> &mut [T] {
        let start = (bi * self.n + pos) * self.d;
        &mut self.data[start..start + self.d]
    }

    /// Right-multiplies every row by `w` (`d x e`), giving a `b x n x e` tensor.
    pub fn matmul(&self, w: &Matrix<T>) -> Result<Tensor3<T>> {
        if self.d != w.rows() {
            return Err(Error::shape(format!(
                "tensor last dim {} against {}x{} matrix",
                self.d,
                w.rows(),
                w.cols()
            )));
        }
        let mut out = Tensor3::zeros(self.b, self.n, w.cols());
        gemm_acc(
            &self.data,
            w.data(),
            &mut out.data,
            self.row_count(),
            self.d,
            w.cols(),
        );
        Ok(out)
    }

    /// Right-multiplies every row by `w^T` (`w` is `e x d`).
    pub fn matmul_t(&self, w: &Matrix<T>) -> Result<Tensor3<T>> {
        if self.d != w.cols() {
            return Err(Error::shape(format!(
                "tensor last dim {} against transposed {}x{} matrix",
                self.d,
                w.rows(),
                w.cols()
            )));
        }
        let mut out = Tensor3::zeros(self.b, self.n, w.rows());
        gemm_nt(
            &self.data,
            w.data(),
            &mut out.data,
            self.row_count(),
            self.d,
            w.rows(),
        );
        Ok(out)
    }

    /// `self^T * other` over the flattened `(b * n)` rows, giving `d x e`.
    pub fn t_matmul(&self, other: &Tensor3<T>) -> Result<Matrix<T>> {
        if self.row_count() != other.row_count() {
            return Err(Error::shape(format!(
                "t_matmul of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.d, other.d);
        gemm_tn_acc(
            &self.data,
            &other.data,
            out.data_mut(),
            self.row_count(),
            self.d,
            other.d,
        );
        Ok(out)
    }

    fn check_same(&self, other: &Tensor3<T>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op} of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor3<T>) -> Result<Tensor3<T>> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.check_same(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self {
            b: self.b,
            n: self.n,
            d: self.d,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor3<T>) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &Tensor3<T>) -> Result<()> {
        self.check_same(other, "sub_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: T) -> Tensor3<T> {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor3<T> {
        Self {
            b: self.b,
            n: self.n,
            d: self.d,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn frobenius_norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            b: self.b,
            n: self.n,
            d: self.d,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Splits along the batch axis into chunks of `size` sequences.
    pub fn split_batch(&self, size: usize) -> Result<Vec<Tensor3<T>>> {
        if size == 0 || self.b % size != 0 {
            return Err(Error::shape(format!(
                "batch {} not divisible by {size}",
                self.b
            )));
        }
        let chunk = size * self.n * self.d;
        Ok(self
            .data
            .chunks_exact(chunk)
            .map(|c| Tensor3 {
                b: size,
                n: self.n,
                d: self.d,
                data: c.to_vec(),
            })
            .collect())
    }
}
