//! Decoder-only transformer without layer norms.
//!
//! Token embeddings are split into a frozen high-rank table `T_fixed` and a
//! trainable table `T_S` whose rows live in the shared subspace. Together with
//! row-constrained `W_p1`/`W_p2` this keeps every layer output, minus the
//! positional and fixed token embeddings, inside the subspace, which is what
//! makes boundary compression lossless. The last layer and the LM head are
//! never constrained.

mod block;

pub use block::{
    backward_block, forward_block, grad_flow_invariance, ActivationStash, BlockStash, LayerParams,
    LAYER_TENSORS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{softmax_rows_in_place, Matrix, Real, Tensor3};
use crate::subspace::Subspace;

/// Standard deviation of every Gaussian-initialized weight.
pub const INIT_STD: f64 = 0.02;

/// Model shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    /// Rows of the positional table, the longest supported sequence.
    pub n_max: usize,
    /// Subspace rank.
    pub k: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d: 64,
            d_ff: 256,
            heads: 4,
            layers: 4,
            vocab: 256,
            n_max: 32,
            k: 8,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, message: String| Err(Error::config(format!("dims.{field}"), message));
        if self.d == 0 {
            return bad("d", "must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(
                "heads",
                format!("{} heads do not divide d={}", self.heads, self.d),
            );
        }
        if self.d_ff == 0 || self.d_ff % self.d != 0 {
            return bad(
                "d_ff",
                format!("{} is not a positive multiple of d={}", self.d_ff, self.d),
            );
        }
        if self.layers == 0 {
            return bad("layers", "must be positive".into());
        }
        if self.vocab == 0 || self.vocab > u32::MAX as usize {
            return bad("vocab", format!("{} is out of range", self.vocab));
        }
        if self.n_max == 0 {
            return bad("n_max", "must be positive".into());
        }
        if self.k == 0 || self.k >= self.d {
            return bad(
                "k",
                format!("need 0 < k < d, got k={} d={}", self.k, self.d),
            );
        }
        Ok(())
    }
}

/// Positional table `P`, frozen token table `T_fixed` and trainable
/// low-rank token table `T_S`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables<T: Real = f32> {
    pub positional: Matrix<T>,
    pub token_fixed: Matrix<T>,
    pub token_low: Matrix<T>,
}

impl<T: Real> EmbeddingTables<T> {
    pub fn d(&self) -> usize {
        self.positional.cols()
    }

    pub fn vocab(&self) -> usize {
        self.token_fixed.rows()
    }

    pub fn n_max(&self) -> usize {
        self.positional.rows()
    }

    fn check_tokens(&self, tokens: &[u32], b: usize, n: usize) -> Result<()> {
        if tokens.len() != b * n {
            return Err(Error::shape(format!(
                "{} token ids for a {b}x{n} batch",
                tokens.len()
            )));
        }
        if n > self.n_max() {
            return Err(Error::Range(format!(
                "sequence length {n} exceeds positional table of {}",
                self.n_max()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.vocab()) {
            return Err(Error::InvalidToken {
                id,
                vocab: self.vocab(),
            });
        }
        Ok(())
    }

    /// `PE + T_fixed[t]`: the part of every layer output that is never sent.
    pub fn base(&self, tokens: &[u32], b: usize, n: usize) -> Result<Tensor3<T>> {
        self.check_tokens(tokens, b, n)?;
        let mut out = Tensor3::zeros(b, n, self.d());
        for bi in 0..b {
            for pos in 0..n {
                let t = tokens[bi * n + pos] as usize;
                let row = out.vector_mut(bi, pos);
                for ((o, &p), &f) in row
                    .iter_mut()
                    .zip(self.positional.row(pos))
                    .zip(self.token_fixed.row(t))
                {
                    *o = p + f;
                }
            }
        }
        Ok(out)
    }

    /// Layer-0 input `PE + T_fixed[t] + T_S[t]`.
    pub fn embed(&self, tokens: &[u32], b: usize, n: usize) -> Result<Tensor3<T>> {
        let mut out = self.base(tokens, b, n)?;
        for bi in 0..b {
            for pos in 0..n {
                let t = tokens[bi * n + pos] as usize;
                for (o, &s) in out
                    .vector_mut(bi, pos)
                    .iter_mut()
                    .zip(self.token_low.row(t))
                {
                    *o += s;
                }
            }
        }
        Ok(out)
    }

    /// Gradients of `T_S` and `P` given the gradient at the layer-0 input.
    pub fn backward(&self, tokens: &[u32], g: &Tensor3<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let (b, n, _) = g.shape();
        self.check_tokens(tokens, b, n)?;
        let mut token = Matrix::zeros(self.vocab(), self.d());
        let mut positional = Matrix::zeros(self.n_max(), self.d());
        for bi in 0..b {
            for pos in 0..n {
                let t = tokens[bi * n + pos] as usize;
                let gv = g.vector(bi, pos);
                for (a, &v) in token.row_mut(t).iter_mut().zip(gv) {
                    *a += v;
                }
                for (a, &v) in positional.row_mut(pos).iter_mut().zip(gv) {
                    *a += v;
                }
            }
        }
        Ok((token, positional))
    }

    pub fn cast<U: Real>(&self) -> EmbeddingTables<U> {
        EmbeddingTables {
            positional: self.positional.cast(),
            token_fixed: self.token_fixed.cast(),
            token_low: self.token_low.cast(),
        }
    }
}

/// Full model: embeddings, `L` blocks and an untied LM head (`d x v`).
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub dims: ModelDims,
    pub layers: Vec<LayerParams<T>>,
    pub embeddings: EmbeddingTables<T>,
    pub head: Matrix<T>,
    /// Whether layers `0..L-1` and `T_S` are held in the subspace.
    pub constrained: bool,
}

/// Gradients for every trainable tensor of a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T: Real = f32> {
    pub layers: Vec<LayerParams<T>>,
    pub token_low: Matrix<T>,
    pub positional: Matrix<T>,
    pub head: Matrix<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            layers: (0..dims.layers)
                .map(|_| LayerParams::zeros(dims.d, dims.d_ff, dims.heads))
                .collect(),
            token_low: Matrix::zeros(dims.vocab, dims.d),
            positional: Matrix::zeros(dims.n_max, dims.d),
            head: Matrix::zeros(dims.d, dims.vocab),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads<T>) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b)?;
        }
        self.token_low.add_assign(&other.token_low)?;
        self.positional.add_assign(&other.positional)?;
        self.head.add_assign(&other.head)
    }

    pub fn scale_in_place(&mut self, alpha: T) {
        for l in &mut self.layers {
            l.scale_in_place(alpha);
        }
        self.token_low.scale_in_place(alpha);
        self.positional.scale_in_place(alpha);
        self.head.scale_in_place(alpha);
    }

    /// All gradient tensors in a fixed order: layers (in [`LAYER_TENSORS`]
    /// order), then `T_S`, `P` and the head.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out: Vec<&Matrix<T>> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        out.extend([&self.token_low, &self.positional, &self.head]);
        out
    }
}

impl<T: Real> Model<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Whether layer `l` is held in the subspace, which makes its output
    /// compressible.
    pub fn layer_constrained(&self, l: usize) -> bool {
        self.constrained && l + 1 < self.layers.len()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            dims: self.dims,
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            embeddings: self.embeddings.cast(),
            head: self.head.cast(),
            constrained: self.constrained,
        }
    }

    /// Re-projects every constrained tensor onto `s`: rows of `W_p1`,
    /// `W_p2` and `T_S`, columns of `W_1`.
    pub fn project_onto(&mut self, s: &Subspace<T>) -> Result<()> {
        if !self.constrained {
            return Ok(());
        }
        for l in 0..self.layers.len() {
            if self.layer_constrained(l) {
                self.layers[l].project_onto(s)?;
            }
        }
        self.embeddings.token_low = s.project_matrix_rows(&self.embeddings.token_low)?;
        Ok(())
    }

    /// Loss and gradients of the plain model, with no boundary codecs.
    pub fn loss_and_grads(
        &self,
        tokens: &[u32],
        targets: &[u32],
        b: usize,
        n: usize,
    ) -> Result<(T, ModelGrads<T>)> {
        let mut x = self.embeddings.embed(tokens, b, n)?;
        let mut stashes = Vec::with_capacity(self.layers.len());
        for (l, p) in self.layers.iter().enumerate() {
            let (y, stash) = forward_block(p, l, &x)?;
            stashes.push(stash);
            x = y;
        }
        let logits = x.matmul(&self.head)?;
        let (loss, dlogits) = lm_loss(&logits, targets)?;
        let mut grads = ModelGrads::zeros(&self.dims);
        grads.head = x.t_matmul(&dlogits)?;
        let mut g = dlogits.matmul_t(&self.head)?;
        for l in (0..self.layers.len()).rev() {
            let (dx, lg) = backward_block(&self.layers[l], &stashes[l], &g)?;
            grads.layers[l] = lg;
            g = dx;
        }
        let (token, positional) = self.embeddings.backward(tokens, &g)?;
        grads.token_low = token;
        grads.positional = positional;
        Ok((loss, grads))
    }
}

/// Deterministically initializes a model and its subspace from `seed`.
///
/// Draw order: subspace basis, `T_fixed`, `P`, each layer, head. With
/// `constrained`, `W_p1`/`W_p2` rows and `W_1` columns of all but the last
/// layer are projected onto the subspace; `T_S` starts as `T_fixed U U^T`
/// either way.
pub fn init_model<T: Real>(
    dims: &ModelDims,
    seed: u64,
    constrained: bool,
) -> Result<(Model<T>, Subspace<T>)> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s64 = Subspace::<f64>::random(dims.d, dims.k, &mut rng)?;
    let subspace = s64.cast::<T>();
    let token_fixed = Matrix::<f64>::gaussian(dims.vocab, dims.d, INIT_STD, &mut rng);
    let positional = Matrix::<f64>::gaussian(dims.n_max, dims.d, INIT_STD, &mut rng);
    let token_low = s64.project_matrix_rows(&token_fixed)?;
    let layers: Vec<LayerParams<T>> = (0..dims.layers)
        .map(|_| {
            LayerParams::<f64>::gaussian(dims.d, dims.d_ff, dims.heads, INIT_STD, &mut rng).cast()
        })
        .collect();
    let head = Matrix::<f64>::gaussian(dims.d, dims.vocab, INIT_STD, &mut rng).cast();
    let mut model = Model {
        dims: *dims,
        layers,
        embeddings: EmbeddingTables {
            positional: positional.cast(),
            token_fixed: token_fixed.cast(),
            token_low: token_low.cast(),
        },
        head,
        constrained,
    };
    model.project_onto(&subspace)?;
    Ok((model, subspace))
}

/// Mean next-token cross-entropy over all `b * n` positions and its gradient
/// with respect to the logits. `targets[i]` is the token that should follow
/// position `i`.
pub fn lm_loss<T: Real>(logits: &Tensor3<T>, targets: &[u32]) -> Result<(T, Tensor3<T>)> {
    let (b, n, v) = logits.shape();
    if targets.len() != b * n {
        return Err(Error::shape(format!(
            "{} targets for {} predicted positions",
            targets.len(),
            b * n
        )));
    }
    if let Some(&id) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::InvalidToken { id, vocab: v });
    }
    if b * n == 0 {
        return Err(Error::Undefined("loss over an empty batch"));
    }
    let inv = T::one() / T::of((b * n) as f64);
    let mut grad = logits.clone();
    let mut total = 0.0f64;
    for (row, &t) in grad.data_mut().chunks_exact_mut(v).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        total += (lse - row[t as usize]).as_f64();
        softmax_rows_in_place(row, v);
        row[t as usize] -= T::one();
        for g in row.iter_mut() {
            *g *= inv;
        }
    }
    Ok((T::of(total / (b * n) as f64), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            d: 8,
            d_ff: 16,
            heads: 2,
            layers: 3,
            vocab: 11,
            n_max: 4,
            k: 3,
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor3::<f64>::zeros(2, 3, 256);
        let (loss, _) = lm_loss(&logits, &[1, 2, 3, 4, 5, 6]).unwrap();
        assert!((loss - 256f64.ln()).abs() < 1e-12);
        assert!((loss - 5.5452).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut logits = Tensor3::<f64>::zeros(1, 1, 4);
        logits.data_mut()[2] = 100.0;
        let (loss, _) = lm_loss(&logits, &[2]).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn out_of_vocab_target_is_rejected() {
        let logits = Tensor3::<f32>::zeros(1, 1, 4);
        assert!(matches!(
            lm_loss(&logits, &[4]),
            Err(Error::InvalidToken { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn low_rank_table_starts_as_projection_of_fixed_table() {
        let s = Subspace::<f64>::coordinate(4, &[0, 1]).unwrap();
        let fixed = Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            s.project_matrix_rows(&fixed).unwrap().data(),
            &[1.0, 2.0, 0.0, 0.0]
        );
    }

    #[test]
    fn init_is_deterministic_and_constrained() {
        let dims = tiny_dims();
        let (a, sa) = init_model::<f32>(&dims, 42, true).unwrap();
        let (b, sb) = init_model::<f32>(&dims, 42, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        for l in 0..dims.layers - 1 {
            assert!(sa.off_subspace_ratio(&a.layers[l].wp1).unwrap() <= 1e-6);
            assert!(sa.off_subspace_ratio(&a.layers[l].wp2).unwrap() <= 1e-6);
            assert!(sa.off_subspace_ratio(&a.layers[l].w1.transpose()).unwrap() <= 1e-6);
        }
        assert!(
            sa.off_subspace_ratio(&a.layers[dims.layers - 1].wp2)
                .unwrap()
                > 0.5
        );
        assert!(sa.off_subspace_ratio(&a.embeddings.token_low).unwrap() <= 1e-6);
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let mut dims = tiny_dims();
        dims.heads = 3;
        assert!(init_model::<f32>(&dims, 0, true).is_err());
        let mut dims = tiny_dims();
        dims.k = dims.d;
        assert!(matches!(dims.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn constrained_residuals_stay_in_subspace() {
        let dims = tiny_dims();
        let (model, s) = init_model::<f64>(&dims, 7, true).unwrap();
        let tokens = [1, 5, 9, 2, 0, 3, 3, 10];
        let base = model.embeddings.base(&tokens, 2, 4).unwrap();
        let mut x = model.embeddings.embed(&tokens, 2, 4).unwrap();
        for l in 0..dims.layers - 1 {
            x = forward_block(&model.layers[l], l, &x).unwrap().0;
            let residual = x.sub(&base).unwrap();
            let off = residual.sub(&s.project_rows(&residual).unwrap()).unwrap();
            assert!(off.frobenius_norm() <= 1e-12 * residual.frobenius_norm());
        }
    }
}
