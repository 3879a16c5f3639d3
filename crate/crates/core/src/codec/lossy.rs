use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix, Real, Tensor3};

/// Lossy baselines for boundary tensors. Each returns the reconstruction the
/// receiver would see and the bytes the sender would put on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossyCodec {
    TopK,
    Quantize,
    Svd,
}

impl LossyCodec {
    pub const ALL: [LossyCodec; 3] = [LossyCodec::TopK, LossyCodec::Quantize, LossyCodec::Svd];

    pub fn name(self) -> &'static str {
        match self {
            Self::TopK => "topk",
            Self::Quantize => "quantize",
            Self::Svd => "svd",
        }
    }

    /// Applies the codec with its parameter chosen so the wire size is as
    /// close as possible to `dense / ratio`, where `dense` is 4 bytes per
    /// entry.
    ///
    /// Top-k keeps `d / (2 ratio)` entries per row (value plus index);
    /// SVD uses rank `rows d / (ratio (rows + d))`; quantization uses 16
    /// bits when `ratio <= 2` and 8 bits otherwise, which is the finest
    /// setting it offers.
    pub fn apply_at_ratio<T: Real>(
        self,
        x: &Tensor3<T>,
        ratio: f64,
    ) -> Result<(Tensor3<T>, usize)> {
        if !(ratio >= 1.0) {
            return Err(Error::Range(format!(
                "compression ratio must be at least 1, got {ratio}"
            )));
        }
        let d = x.dim();
        let rows = x.row_count();
        match self {
            Self::TopK => {
                let keep = ((d as f64 / (2.0 * ratio)).floor() as usize).clamp(1, d);
                lossy_topk(x, keep as f64 / d as f64)
            }
            Self::Quantize => lossy_quantize(x, if ratio <= 2.0 { 16 } else { 8 }),
            Self::Svd => {
                let r = (rows * d) as f64 / (ratio * (rows + d) as f64);
                lossy_svd(x, (r.floor() as usize).clamp(1, rows.min(d)))
            }
        }
    }
}

impl fmt::Display for LossyCodec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossyCodec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(Self::TopK),
            "quantize" | "quant" => Ok(Self::Quantize),
            "svd" => Ok(Self::Svd),
            other => Err(Error::config(
                "mode",
                format!("unknown lossy codec {other:?}"),
            )),
        }
    }
}

/// Keeps the `round(keep_fraction d)` largest-magnitude entries of every row
/// (at least one). Ties go to the lower index. Costs 4 bytes of value and 4
/// bytes of index per kept entry.
pub fn lossy_topk<T: Real>(x: &Tensor3<T>, keep_fraction: f64) -> Result<(Tensor3<T>, usize)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Range(format!(
            "keep fraction {keep_fraction} outside (0, 1]"
        )));
    }
    let d = x.dim();
    let keep = ((keep_fraction * d as f64).round() as usize).clamp(1, d.max(1));
    let mut out = Tensor3::zeros(x.batch(), x.seq(), d);
    let mut order: Vec<usize> = (0..d).collect();
    for (src, dst) in x
        .data()
        .chunks_exact(d)
        .zip(out.data_mut().chunks_exact_mut(d))
    {
        order.sort_by(|&i, &j| {
            src[j]
                .abs()
                .partial_cmp(&src[i].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        for &i in &order[..keep] {
            dst[i] = src[i];
        }
        order.sort_unstable();
    }
    Ok((out, x.row_count() * keep * 8))
}

/// Per-tensor linear min/max quantization to `bits` bits. The wire carries
/// the packed codes plus the two `f32` range endpoints.
pub fn lossy_quantize<T: Real>(x: &Tensor3<T>, bits: u32) -> Result<(Tensor3<T>, usize)> {
    if bits != 8 && bits != 16 {
        return Err(Error::Range(format!(
            "quantization supports 8 or 16 bits, got {bits}"
        )));
    }
    let len = x.data().len();
    let wire = (len * bits as usize).div_ceil(8) + 8;
    let lo = x.data().iter().copied().fold(T::infinity(), T::min);
    let hi = x.data().iter().copied().fold(T::neg_infinity(), T::max);
    if len == 0 || hi <= lo {
        return Ok((x.clone(), wire));
    }
    let levels = T::of(((1u64 << bits) - 1) as f64);
    let step = (hi - lo) / levels;
    Ok((x.map(|v| lo + ((v - lo) / step).round() * step), wire))
}

/// Best rank-`rank` approximation of the `(b n) x d` unfolding, obtained
/// from the leading eigenvectors of `X^T X`. Costs `rank (b n + d)` floats.
pub fn lossy_svd<T: Real>(x: &Tensor3<T>, rank: usize) -> Result<(Tensor3<T>, usize)> {
    let rows = x.row_count();
    let d = x.dim();
    if rank == 0 || rank > rows.min(d) {
        return Err(Error::Range(format!(
            "rank {rank} outside [1, {}] for a {rows}x{d} unfolding",
            rows.min(d)
        )));
    }
    let m = x.to_matrix().cast::<f64>();
    let eig = symmetric_eigen(&m.t_matmul(&m)?)?;
    let basis = eig.vectors.col_block(0, rank);
    let approx: Matrix<f64> = m.matmul(&basis)?.matmul_t(&basis)?;
    let out = Tensor3::from_matrix(approx.cast::<T>(), x.batch(), x.seq())?;
    Ok((out, rank * (rows + d) * 4))
}

/// `||approx - x||_F^2 / ||x||_F^2`.
pub fn relative_mse<T: Real>(approx: &Tensor3<T>, x: &Tensor3<T>) -> Result<f64> {
    let den = x.frobenius_norm_sq().as_f64();
    if den == 0.0 {
        return Err(Error::Undefined("relative error of a zero tensor"));
    }
    Ok(approx.sub(x)?.frobenius_norm_sq().as_f64() / den)
}
