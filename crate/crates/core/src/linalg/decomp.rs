//! Factorizations. All of them run in 64-bit internally and convert back to
//! the caller's precision at the end.

use super::{Matrix, Real};
use crate::error::{Error, Result};

/// Relative threshold on `|R[i,i]| / ||A||_F` below which a column is
/// considered linearly dependent.
const QR_DEGENERATE_TOL: f64 = 1e-10;

/// Thin Householder QR of a tall matrix: `a = Q R` with `Q` (`m x n`) having
/// orthonormal columns and `R` (`n x n`) upper triangular with a non-negative
/// diagonal.
pub fn qr_thin<T: Real>(a: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::shape(format!(
            "qr_thin needs rows >= cols, got {m}x{n}"
        )));
    }
    let norm = a.cast::<f64>().frobenius_norm();
    let mut r: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);

    for j in 0..n {
        let mut v: Vec<f64> = (j..m).map(|i| r[i * n + j]).collect();
        let xnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if xnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -xnorm } else { xnorm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for c in j..n {
            let proj: f64 = v
                .iter()
                .enumerate()
                .map(|(t, vi)| vi * r[(j + t) * n + c])
                .sum();
            for (t, vi) in v.iter().enumerate() {
                r[(j + t) * n + c] -= 2.0 * vi * proj;
            }
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = vec![0.0f64; m * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for j in (0..n).rev() {
        let v = &reflectors[j];
        if v.is_empty() {
            continue;
        }
        for c in 0..n {
            let proj: f64 = v
                .iter()
                .enumerate()
                .map(|(t, vi)| vi * q[(j + t) * n + c])
                .sum();
            for (t, vi) in v.iter().enumerate() {
                q[(j + t) * n + c] -= 2.0 * vi * proj;
            }
        }
    }

    let mut r_out = vec![0.0f64; n * n];
    for i in 0..n {
        for c in i..n {
            r_out[i * n + c] = r[i * n + c];
        }
    }
    for i in 0..n {
        if r_out[i * n + i] < 0.0 {
            for c in i..n {
                r_out[i * n + c] = -r_out[i * n + c];
            }
            for row in 0..m {
                q[row * n + i] = -q[row * n + i];
            }
        }
        let diag = r_out[i * n + i];
        if diag <= QR_DEGENERATE_TOL * norm {
            return Err(Error::DegenerateBasis {
                column: i,
                diag,
                threshold: QR_DEGENERATE_TOL * norm,
            });
        }
    }

    let q = Matrix::from_vec(m, n, q.into_iter().map(T::of).collect())?;
    let r = Matrix::from_vec(n, n, r_out.into_iter().map(T::of).collect())?;
    Ok((q, r))
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, ordered like `values`.
    pub vectors: Matrix<f64>,
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Only the upper
/// triangle's symmetry is assumed, not checked.
pub fn symmetric_eigen<T: Real>(a: &Matrix<T>) -> Result<SymmetricEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(format!(
            "eigen of non-square {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut s: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = s.iter().map(|x| x * x).sum();

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += s[p * n + q] * s[p * n + q];
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = s[p * n + p];
                let aqq = s[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = s[k * n + p];
                    let akq = s[k * n + q];
                    s[k * n + p] = c * akp - sn * akq;
                    s[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = s[p * n + k];
                    let aqk = s[q * n + k];
                    s[p * n + k] = c * apk - sn * aqk;
                    s[q * n + k] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j * n + j].total_cmp(&s[i * n + i]));
    let values = order.iter().map(|&i| s[i * n + i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[r * n + order[c]]);
    Ok(SymmetricEigen { values, vectors })
}

/// Singular values in descending order, via Jacobi on the smaller Gram
/// matrix. The result has `min(rows, cols)` entries.
pub fn singular_values<T: Real>(a: &Matrix<T>) -> Vec<f64> {
    let a64 = a.cast::<f64>();
    let gram = if a.rows() >= a.cols() {
        a64.t_matmul(&a64)
    } else {
        a64.matmul_t(&a64)
    }
    .expect("gram shapes agree");
    symmetric_eigenvalues(&gram)
        .expect("gram is square")
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

/// Eigenvalues of a symmetric matrix in descending order, by Householder
/// tridiagonalization and implicit QL. Cheaper than [`symmetric_eigen`]
/// when the vectors are not needed.
pub fn symmetric_eigenvalues<T: Real>(a: &Matrix<T>) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(format!(
            "eigen of non-square {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut s: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    tridiagonalize(&mut s, n, &mut d, &mut e);
    tridiagonal_ql(&mut d, &mut e)?;
    d.sort_by(|x, y| y.total_cmp(x));
    Ok(d)
}

fn tridiagonalize(a: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[i * n + k].abs()).sum();
            if scale == 0.0 {
                e[i] = a[i * n + l];
            } else {
                for k in 0..=l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[j * n + k] * a[i * n + k];
                    }
                    for k in j + 1..=l {
                        g += a[k * n + j] * a[i * n + k];
                    }
                    e[j] = g / h;
                    f += e[j] * a[i * n + j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[i * n + j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[j * n + k] -= f * e[k] + g * a[i * n + k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l];
        }
        d[i] = h;
    }
    for i in 0..n {
        d[i] = a[i * n + i];
    }
}

fn tridiagonal_ql(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::Undefined("tridiagonal QL did not converge"));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + if g >= 0.0 { r } else { -r });
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                let r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                let r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// `sum(sigma_i^2) / max(sigma_i^2)`.
pub fn stable_rank<T: Real>(a: &Matrix<T>) -> Result<f64> {
    let sv = singular_values(a);
    let max = sv.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Err(Error::Undefined("stable rank of a zero matrix"));
    }
    let energy: f64 = sv.iter().map(|s| s * s).sum();
    Ok(energy / (max * max))
}
