//! The shared subspace `S` and everything that acts on it: row projection,
//! the boundary compress/decompress pair, the Grassmann loss with its
//! accumulator and retracted gradient step, and a few diagnostics.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{qr_thin, Matrix, Real, Tensor3};

/// Orthonormal basis `U_k` (`d x k`) of the shared subspace, tagged with a
/// version that increases on every update.
#[derive(Clone, Debug, PartialEq)]
pub struct Subspace<T: Real = f32> {
    basis: Matrix<T>,
    version: u32,
}

impl<T: Real> Subspace<T> {
    /// Wraps an existing basis. Columns must be orthonormal to 1e-5.
    pub fn from_basis(basis: Matrix<T>, version: u32) -> Result<Self> {
        let (d, k) = basis.shape();
        if k == 0 || k >= d {
            return Err(Error::shape(format!(
                "subspace needs 0 < k < d, got d={d} k={k}"
            )));
        }
        let gram = basis.cast::<f64>();
        let err = gram
            .t_matmul(&gram)?
            .sub(&Matrix::identity(k))?
            .frobenius_norm();
        if err > 1e-5 {
            return Err(Error::Undefined(
                "subspace basis columns are not orthonormal",
            ));
        }
        Ok(Self { basis, version })
    }

    /// Orthonormalized isotropic Gaussian basis, version 0.
    pub fn random<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Result<Self> {
        let g = Matrix::<f64>::gaussian(d, k, 1.0, rng);
        let (q, _) = qr_thin(&g)?;
        Self::from_basis(q.cast(), 0)
    }

    /// Basis spanned by the coordinate axes `axes` of `R^d`.
    pub fn coordinate(d: usize, axes: &[usize]) -> Result<Self> {
        let mut basis = Matrix::zeros(d, axes.len());
        for (c, &axis) in axes.iter().enumerate() {
            if axis >= d {
                return Err(Error::Range(format!("axis {axis} outside R^{d}")));
            }
            basis[(axis, c)] = T::one();
        }
        Self::from_basis(basis, 0)
    }

    pub fn basis(&self) -> &Matrix<T> {
        &self.basis
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn d(&self) -> usize {
        self.basis.rows()
    }

    pub fn k(&self) -> usize {
        self.basis.cols()
    }

    /// Same basis with a different precision. Casting does not preserve exact
    /// orthonormality; use [`Subspace::reorthonormalized`] when that matters.
    pub fn cast<U: Real>(&self) -> Subspace<U> {
        Subspace {
            basis: self.basis.cast(),
            version: self.version,
        }
    }

    /// Re-runs QR on the basis, which restores orthonormality to the working
    /// precision without changing the spanned subspace.
    pub fn reorthonormalized(&self) -> Result<Self> {
        let (q, _) = qr_thin(&self.basis)?;
        Ok(Self {
            basis: q,
            version: self.version,
        })
    }

    /// `U_k U_k^T`.
    pub fn projector(&self) -> Matrix<T> {
        self.basis
            .matmul_t(&self.basis)
            .expect("basis shapes agree")
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.d() {
            return Err(Error::shape(format!(
                "last dimension {got} does not match subspace ambient dimension {}",
                self.d()
            )));
        }
        Ok(())
    }

    /// `m U_k U_k^T`: projects every row of `m` onto `S`.
    pub fn project_matrix_rows(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_dim(m.cols())?;
        m.matmul(&self.basis)?.matmul_t(&self.basis)
    }

    /// `U_k U_k^T m`: projects every column of `m` onto `S`.
    pub fn project_matrix_cols(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_dim(m.rows())?;
        self.basis.matmul(&self.basis.t_matmul(m)?)
    }

    /// `x U_k U_k^T` for a batched tensor.
    pub fn project_rows(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.check_dim(x.dim())?;
        x.matmul(&self.basis)?.matmul_t(&self.basis)
    }

    /// `x U_k`: `k` coefficients per row.
    pub fn compress(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.check_dim(x.dim())?;
        x.matmul(&self.basis)
    }

    /// `c U_k^T`. `version` is the subspace version the coefficients were
    /// computed against.
    pub fn decompress(&self, c: &Tensor3<T>, version: u32) -> Result<Tensor3<T>> {
        if version != self.version {
            return Err(Error::StaleSubspace {
                frame: version,
                local: self.version,
            });
        }
        if c.dim() != self.k() {
            return Err(Error::shape(format!(
                "coefficient width {} does not match subspace rank {}",
                c.dim(),
                self.k()
            )));
        }
        c.matmul_t(&self.basis)
    }

    /// `||g (I - U_k U_k^T)||_F^2`, the energy of `g` outside `S`.
    pub fn grassmann_loss(&self, g: &Tensor3<T>) -> Result<T> {
        let p = self.project_rows(g)?;
        Ok(g.sub(&p)?.frobenius_norm_sq())
    }

    /// `||m (I - U_k U_k^T)||_F / ||m||_F`.
    pub fn off_subspace_ratio(&self, m: &Matrix<T>) -> Result<T> {
        let norm = m.frobenius_norm();
        if norm == T::zero() {
            return Err(Error::Undefined("off-subspace ratio of a zero matrix"));
        }
        let residual = m.sub(&self.project_matrix_rows(m)?)?;
        Ok(residual.frobenius_norm() / norm)
    }

    /// `Tr(U_k^T S U_k)`: energy of a symmetric accumulation captured by `S`.
    pub fn captured_energy(&self, s: &Matrix<T>) -> Result<T> {
        Ok(self.basis.t_matmul(&s.matmul(&self.basis)?)?.trace())
    }

    /// `-2 S U_k`, the Euclidean gradient of `Tr(S) - Tr(U_k^T S U_k)`.
    pub fn euclidean_gradient(&self, s: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(s.matmul(&self.basis)?.scale(T::of(-2.0)))
    }

    /// One retracted Riemannian gradient step on the Grassmann loss
    /// accumulated in `acc`.
    ///
    /// The Euclidean gradient `-2 S U_k` is projected onto the tangent space
    /// at `U_k`, a descent step of size `eta` is taken, and QR maps the
    /// result back onto the manifold. The returned snapshot has
    /// `version + 1`.
    pub fn grassmann_step(&self, acc: &GrassmannAccumulator<T>, eta: T) -> Result<Self> {
        if !(eta > T::zero()) {
            return Err(Error::Range(format!(
                "grassmann step size must be positive, got {eta}"
            )));
        }
        if acc.sample_count() == 0 {
            return Err(Error::Undefined("grassmann step with an empty accumulator"));
        }
        self.check_dim(acc.dim())?;
        let grad = self.euclidean_gradient(acc.mean())?;
        let along = self.basis.matmul(&self.basis.t_matmul(&grad)?)?;
        let tangent = grad.sub(&along)?;
        let mut moved = self.basis.clone();
        moved.axpy(-eta, &tangent)?;
        let (q, _) = qr_thin(&moved)?;
        Ok(Self {
            basis: q,
            version: self.version.wrapping_add(1),
        })
    }
}

/// Running mean of `G_t^T G_t` over the gradients observed at the last
/// compressed layer since the previous subspace update.
#[derive(Clone, Debug, PartialEq)]
pub struct GrassmannAccumulator<T: Real = f32> {
    mean: Matrix<T>,
    sample_count: usize,
}

impl<T: Real> GrassmannAccumulator<T> {
    pub fn new(d: usize) -> Self {
        Self {
            mean: Matrix::zeros(d, d),
            sample_count: 0,
        }
    }

    /// Rebuilds an accumulator from a saved mean and sample count.
    pub fn from_parts(mean: Matrix<T>, sample_count: usize) -> Result<Self> {
        if mean.rows() != mean.cols() {
            return Err(Error::shape("accumulator mean must be square"));
        }
        Ok(Self { mean, sample_count })
    }

    pub fn dim(&self) -> usize {
        self.mean.rows()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// The accumulated `S = (1/K) sum_t G_t^T G_t`.
    pub fn mean(&self) -> &Matrix<T> {
        &self.mean
    }

    /// Adds one sample; `g` is flattened to `(b n) x d` first.
    pub fn accumulate(&mut self, g: &Tensor3<T>) -> Result<()> {
        if g.dim() != self.dim() {
            return Err(Error::shape(format!(
                "gradient width {} does not match accumulator dimension {}",
                g.dim(),
                self.dim()
            )));
        }
        let flat = g.to_matrix();
        let gram = flat.t_matmul(&flat)?;
        self.add_gram(&gram)
    }

    /// Adds one precomputed `G^T G` sample.
    pub fn add_gram(&mut self, gram: &Matrix<T>) -> Result<()> {
        if gram.shape() != self.mean.shape() {
            return Err(Error::shape("gram sample does not match accumulator"));
        }
        self.sample_count += 1;
        let w = T::one() / T::of(self.sample_count as f64);
        for (m, &g) in self.mean.data_mut().iter_mut().zip(gram.data()) {
            *m += (g - *m) * w;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.mean.fill(T::zero());
        self.sample_count = 0;
    }

    /// `Tr(S) - Tr(U^T S U)`: the mean Grassmann loss of the accumulated
    /// samples under `s`.
    pub fn loss_under(&self, s: &Subspace<T>) -> Result<T> {
        Ok(self.mean.trace() - s.captured_energy(&self.mean)?)
    }
}

/// Result of checking the orthogonal distortion bound for `b = v ⊙ a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortionCheck {
    /// `||b_perp||`, the part of `b` orthogonal to `a`.
    pub lhs: f64,
    /// `(max v - min v) / 2 * ||a||`.
    pub rhs: f64,
    pub holds: bool,
    /// `(Γ - 1) / 2 * ||b||` with `Γ = max v / min v`.
    pub alt_rhs: f64,
    pub alt_holds: bool,
}

/// Checks how far an elementwise positive rescaling `v` can rotate `a`.
pub fn distortion_bound_check(a: &[f64], v: &[f64]) -> Result<DistortionCheck> {
    if a.len() != v.len() {
        return Err(Error::shape(format!(
            "a has {} entries, v has {}",
            a.len(),
            v.len()
        )));
    }
    let aa: f64 = a.iter().map(|x| x * x).sum();
    if aa == 0.0 {
        return Err(Error::Undefined("distortion bound for a zero vector"));
    }
    if v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Range("scales must be strictly positive".into()));
    }
    let b: Vec<f64> = a.iter().zip(v).map(|(x, s)| x * s).collect();
    let ba: f64 = b.iter().zip(a).map(|(x, y)| x * y).sum();
    let coef = ba / aa;
    let lhs = b
        .iter()
        .zip(a)
        .map(|(bi, ai)| {
            let r = bi - coef * ai;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rhs = (hi - lo) / 2.0 * aa.sqrt();
    let b_norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let alt_rhs = (hi / lo - 1.0) / 2.0 * b_norm;
    Ok(DistortionCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
        alt_rhs,
        alt_holds: lhs <= alt_rhs + 1e-9,
    })
}
