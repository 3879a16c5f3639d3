//! AdamW with the literal moment normalization `M / (beta1 + eps)`,
//! `V / (beta2 + eps)` and an unscaled decay term `-lambda W`, plus the
//! row-constant second-moment variant that keeps row spaces closed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};
use crate::subspace::Subspace;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdamMode {
    /// `M^ = M / (beta1 + eps)`, `V^ = V / (beta2 + eps)`, `W -= lambda W`.
    #[default]
    Literal,
    /// Step-dependent bias correction and `W -= eta lambda W`.
    Conventional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mode: AdamMode,
    /// Use the row-constant second moment for `W_p2` of constrained layers.
    pub row_constant_wp2: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mode: AdamMode::Literal,
            row_constant_wp2: true,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, message: String| Err(Error::config(format!("optim.{field}"), message));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} is not a positive finite rate", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", format!("{} outside [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", format!("{} outside [0, 1)", self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return bad(
                "weight_decay",
                format!("{} outside [0, 1)", self.weight_decay),
            );
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` of `total`: linear warmup over
    /// `warmup_steps`, then linear decay to zero at `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if total <= self.warmup_steps {
            return self.lr;
        }
        let left = total.saturating_sub(step) as f64;
        self.lr * left / (total - self.warmup_steps) as f64
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState<T: Real = f32> {
    pub m: Matrix<T>,
    pub v: Matrix<T>,
    pub t: u64,
    pub row_constant: bool,
}

impl<T: Real> MomentState<T> {
    pub fn new(rows: usize, cols: usize, row_constant: bool) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            row_constant,
        }
    }

    pub fn like(w: &Matrix<T>, row_constant: bool) -> Self {
        Self::new(w.rows(), w.cols(), row_constant)
    }
}

/// Replaces every row of `v_hat` by its mean.
pub fn row_constant_second_moment<T: Real>(v_hat: &Matrix<T>) -> Matrix<T> {
    let mut out = v_hat.clone();
    row_constant_in_place(&mut out);
    out
}

fn row_constant_in_place<T: Real>(v: &mut Matrix<T>) {
    let cols = v.cols();
    if cols == 0 {
        return;
    }
    let inv = T::one() / T::of(cols as f64);
    for r in 0..v.rows() {
        let row = v.row_mut(r);
        let mean = row.iter().copied().sum::<T>() * inv;
        row.iter_mut().for_each(|x| *x = mean);
    }
}

/// One AdamW update of `w` with gradient `g` at learning rate `lr`.
pub fn adamw_step<T: Real>(
    w: &mut Matrix<T>,
    g: &Matrix<T>,
    st: &mut MomentState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if w.shape() != g.shape() || w.shape() != st.m.shape() {
        return Err(Error::shape(format!(
            "adam step on {:?} with gradient {:?} and moments {:?}",
            w.shape(),
            g.shape(),
            st.m.shape()
        )));
    }
    st.t += 1;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    for ((m, v), &gv) in
        st.m.data_mut()
            .iter_mut()
            .zip(st.v.data_mut())
            .zip(g.data())
    {
        *m = b1 * *m + (one - b1) * gv;
        *v = b2 * *v + (one - b2) * gv * gv;
    }
    let (m_div, v_div) = match cfg.mode {
        AdamMode::Literal => (cfg.beta1 + cfg.eps, cfg.beta2 + cfg.eps),
        AdamMode::Conventional => (
            1.0 - cfg.beta1.powi(st.t.min(i32::MAX as u64) as i32),
            1.0 - cfg.beta2.powi(st.t.min(i32::MAX as u64) as i32),
        ),
    };
    let mut v_hat = st.v.scale(T::of(1.0 / v_div));
    if st.row_constant {
        row_constant_in_place(&mut v_hat);
    }
    let m_scale = T::of(1.0 / m_div);
    let eta = T::of(lr);
    let eps = T::of(cfg.eps);
    let decay = match cfg.mode {
        AdamMode::Literal => T::of(cfg.weight_decay),
        AdamMode::Conventional => T::of(lr * cfg.weight_decay),
    };
    for ((wv, &m), &vh) in w.data_mut().iter_mut().zip(st.m.data()).zip(v_hat.data()) {
        let step = eta * (m * m_scale) / (vh.sqrt() + eps);
        *wv = *wv - step - decay * *wv;
    }
    Ok(())
}

/// Moves moments of a row-constrained tensor into a new subspace:
/// `M <- M P_old P_new`.
pub fn rotate_row_moments<T: Real>(
    m: &Matrix<T>,
    old: &Subspace<T>,
    new: &Subspace<T>,
) -> Result<Matrix<T>> {
    new.project_matrix_rows(&old.project_matrix_rows(m)?)
}

/// Column-constrained counterpart: `M <- P_new P_old M`.
pub fn rotate_col_moments<T: Real>(
    m: &Matrix<T>,
    old: &Subspace<T>,
    new: &Subspace<T>,
) -> Result<Matrix<T>> {
    new.project_matrix_cols(&old.project_matrix_cols(m)?)
}
