use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{softmax_rows_in_place, Matrix, Real, Tensor3};
use crate::subspace::Subspace;

/// Weights of one transformer layer.
///
/// The per-head query, key and value maps are stored side by side: head `h`
/// owns columns `h * d_H .. (h + 1) * d_H` of `wq`, `wk` and `wv`.
/// The same struct holds weight gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    pub heads: usize,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    /// Attention output projection, `d x d`.
    pub wp1: Matrix<T>,
    /// MLP up-projection, `d x d_ff`.
    pub w1: Matrix<T>,
    /// MLP down-projection, `d_ff x d`.
    pub wp2: Matrix<T>,
}

/// Names of the six weight tensors, in [`LayerParams::tensors`] order.
pub const LAYER_TENSORS: [&str; 6] = ["wq", "wk", "wv", "wp1", "w1", "wp2"];

impl<T: Real> LayerParams<T> {
    pub fn zeros(d: usize, d_ff: usize, heads: usize) -> Self {
        Self {
            heads,
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wp1: Matrix::zeros(d, d),
            w1: Matrix::zeros(d, d_ff),
            wp2: Matrix::zeros(d_ff, d),
        }
    }

    /// I.i.d. `N(0, std^2)` entries, drawn in field order.
    pub fn gaussian<R: Rng + ?Sized>(
        d: usize,
        d_ff: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            wq: Matrix::gaussian(d, d, std, rng),
            wk: Matrix::gaussian(d, d, std, rng),
            wv: Matrix::gaussian(d, d, std, rng),
            wp1: Matrix::gaussian(d, d, std, rng),
            w1: Matrix::gaussian(d, d_ff, std, rng),
            wp2: Matrix::gaussian(d_ff, d, std, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads
    }

    /// Query weights of head `h`, `d x d_H`.
    pub fn query_head(&self, h: usize) -> Matrix<T> {
        self.wq.col_block(h * self.head_dim(), self.head_dim())
    }

    pub fn tensors(&self) -> [&Matrix<T>; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wp1, &self.w1, &self.wp2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 6] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wp1,
            &mut self.w1,
            &mut self.wp2,
        ]
    }

    pub fn add_assign(&mut self, other: &LayerParams<T>) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: T) {
        for t in self.tensors_mut() {
            t.scale_in_place(alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        LayerParams {
            heads: self.heads,
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wp1: self.wp1.cast(),
            w1: self.w1.cast(),
            wp2: self.wp2.cast(),
        }
    }

    /// Rows of `wp1` and `wp2`, and columns of `w1`, projected onto `s`.
    pub fn project_onto(&mut self, s: &Subspace<T>) -> Result<()> {
        self.wp1 = s.project_matrix_rows(&self.wp1)?;
        self.w1 = s.project_matrix_cols(&self.w1)?;
        self.wp2 = s.project_matrix_rows(&self.wp2)?;
        Ok(())
    }
}

/// Intermediate values of one block forward, kept for its backward.
#[derive(Clone, Debug)]
pub struct BlockStash<T: Real = f32> {
    pub x: Tensor3<T>,
    pub q: Tensor3<T>,
    pub k: Tensor3<T>,
    pub v: Tensor3<T>,
    /// Attention probabilities, `[batch][head][query][key]`.
    pub probs: Vec<T>,
    pub concat: Tensor3<T>,
    pub x_attn: Tensor3<T>,
    pub hidden: Tensor3<T>,
}

/// Stashes of in-flight microbatches keyed by `(layer, microbatch)`.
#[derive(Clone, Debug)]
pub struct ActivationStash<T: Real = f32> {
    entries: BTreeMap<(usize, usize), BlockStash<T>>,
}

impl<T: Real> Default for ActivationStash<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Real> ActivationStash<T> {
    pub fn insert(&mut self, layer: usize, microbatch: usize, stash: BlockStash<T>) {
        self.entries.insert((layer, microbatch), stash);
    }

    pub fn take(&mut self, layer: usize, microbatch: usize) -> Result<BlockStash<T>> {
        self.entries.remove(&(layer, microbatch)).ok_or_else(|| {
            Error::Protocol(format!(
                "no stashed activations for layer {layer}, microbatch {microbatch}"
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

fn check_width<T: Real>(p: &LayerParams<T>, x: &Tensor3<T>) -> Result<()> {
    if x.dim() != p.d() {
        return Err(Error::shape(format!(
            "block input width {} against model width {}",
            x.dim(),
            p.d()
        )));
    }
    if p.heads == 0 || p.d() % p.heads != 0 {
        return Err(Error::shape(format!(
            "{} heads do not divide d={}",
            p.heads,
            p.d()
        )));
    }
    Ok(())
}

/// Causal multi-head self-attention, projection, ReLU MLP and both residual
/// connections. `layer` only labels numeric-fault errors.
pub fn forward_block<T: Real>(
    p: &LayerParams<T>,
    layer: usize,
    x: &Tensor3<T>,
) -> Result<(Tensor3<T>, BlockStash<T>)> {
    check_width(p, x)?;
    let (b, n, d) = x.shape();
    let heads = p.heads;
    let dh = p.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();

    let q = x.matmul(&p.wq)?;
    let k = x.matmul(&p.wk)?;
    let v = x.matmul(&p.wv)?;
    let mut probs = vec![T::zero(); b * heads * n * n];
    let mut concat = Tensor3::zeros(b, n, d);

    for bi in 0..b {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let block = &mut probs[(bi * heads + h) * n * n..][..n * n];
            for i in 0..n {
                let qi = &q.vector(bi, i)[cols.clone()];
                let row = &mut block[i * n..(i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if j > i {
                        T::neg_infinity()
                    } else {
                        crate::linalg::dot(qi, &k.vector(bi, j)[cols.clone()]) * scale
                    };
                }
                softmax_rows_in_place(row, n);
                let mut out = vec![T::zero(); dh];
                for (j, &a) in row.iter().enumerate().take(i + 1) {
                    for (o, &vv) in out.iter_mut().zip(&v.vector(bi, j)[cols.clone()]) {
                        *o += a * vv;
                    }
                }
                concat.vector_mut(bi, i)[cols.clone()].copy_from_slice(&out);
            }
        }
    }

    let mut x_attn = concat.matmul(&p.wp1)?;
    x_attn.add_assign(x)?;
    let hidden = crate::linalg::relu(&x_attn.matmul(&p.w1)?);
    let mut out = hidden.matmul(&p.wp2)?;
    out.add_assign(&x_attn)?;
    if !out.is_finite() {
        return Err(Error::NumericFault { layer });
    }
    let stash = BlockStash {
        x: x.clone(),
        q,
        k,
        v,
        probs,
        concat,
        x_attn,
        hidden,
    };
    Ok((out, stash))
}

/// Gradient of the block with respect to its input and all six weights,
/// given the gradient `g` at its output.
pub fn backward_block<T: Real>(
    p: &LayerParams<T>,
    stash: &BlockStash<T>,
    g: &Tensor3<T>,
) -> Result<(Tensor3<T>, LayerParams<T>)> {
    check_width(p, g)?;
    if g.shape() != stash.x.shape() {
        return Err(Error::shape(format!(
            "gradient {:?} does not match stashed input {:?}",
            g.shape(),
            stash.x.shape()
        )));
    }
    let (b, n, d) = g.shape();
    let heads = p.heads;
    let dh = p.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();

    let grad_wp2 = stash.hidden.t_matmul(g)?;
    let mut d_pre = g.matmul_t(&p.wp2)?;
    for (dv, &hv) in d_pre.data_mut().iter_mut().zip(stash.hidden.data()) {
        if hv <= T::zero() {
            *dv = T::zero();
        }
    }
    let grad_w1 = stash.x_attn.t_matmul(&d_pre)?;
    let mut d_attn = d_pre.matmul_t(&p.w1)?;
    d_attn.add_assign(g)?;
    let grad_wp1 = stash.concat.t_matmul(&d_attn)?;
    let d_concat = d_attn.matmul_t(&p.wp1)?;

    let mut dq = Tensor3::zeros(b, n, d);
    let mut dk = Tensor3::zeros(b, n, d);
    let mut dv = Tensor3::zeros(b, n, d);
    let mut d_probs = vec![T::zero(); n];
    for bi in 0..b {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let block = &stash.probs[(bi * heads + h) * n * n..][..n * n];
            for i in 0..n {
                let row = &block[i * n..(i + 1) * n];
                let d_out = &d_concat.vector(bi, i)[cols.clone()];
                let mut weighted = T::zero();
                for j in 0..=i {
                    d_probs[j] = crate::linalg::dot(d_out, &stash.v.vector(bi, j)[cols.clone()]);
                    weighted += row[j] * d_probs[j];
                    let dvj = &mut dv.vector_mut(bi, j)[cols.clone()];
                    for (acc, &o) in dvj.iter_mut().zip(d_out) {
                        *acc += row[j] * o;
                    }
                }
                for j in 0..=i {
                    let ds = row[j] * (d_probs[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &stash.k.vector(bi, j)[cols.clone()];
                    let dqi = &mut dq.vector_mut(bi, i)[cols.clone()];
                    for (acc, &kv) in dqi.iter_mut().zip(kj) {
                        *acc += ds * kv;
                    }
                    let qi = &stash.q.vector(bi, i)[cols.clone()];
                    let dkj = &mut dk.vector_mut(bi, j)[cols.clone()];
                    for (acc, &qv) in dkj.iter_mut().zip(qi) {
                        *acc += ds * qv;
                    }
                }
            }
        }
    }

    let grads = LayerParams {
        heads,
        wq: stash.x.t_matmul(&dq)?,
        wk: stash.x.t_matmul(&dk)?,
        wv: stash.x.t_matmul(&dv)?,
        wp1: grad_wp1,
        w1: grad_w1,
        wp2: grad_wp2,
    };
    let mut dx = d_attn;
    dx.add_assign(&dq.matmul_t(&p.wq)?)?;
    dx.add_assign(&dk.matmul_t(&p.wk)?)?;
    dx.add_assign(&dv.matmul_t(&p.wv)?)?;
    Ok((dx, grads))
}

/// `||g W_p2^T - (g U U^T) W_p2^T||_F`: how much projecting the incoming
/// gradient onto `s` changes the gradient flowing back through `W_p2`.
pub fn grad_flow_invariance<T: Real>(
    wp2: &Matrix<T>,
    g: &Tensor3<T>,
    s: &Subspace<T>,
) -> Result<T> {
    let direct = g.matmul_t(wp2)?;
    let projected = s.project_rows(g)?.matmul_t(wp2)?;
    Ok(direct.sub(&projected)?.frobenius_norm())
}
