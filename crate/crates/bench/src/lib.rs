//! Fixtures shared by the benchmarks: a constrained desk-scale model and
//! one microbatch of its boundary activations.

use subpipe_core::experiments::boundary_activations;
use subpipe_core::model::init_model;
use subpipe_core::{Model, ModelDims, Subspace, Tensor3};

pub struct Fixture {
    pub model: Model,
    pub subspace: Subspace,
    pub tokens: Vec<u32>,
    pub b: usize,
    pub n: usize,
    /// Input to block 0.
    pub input: Tensor3<f32>,
    /// Output of block 0.
    pub boundary: Tensor3<f32>,
}

pub fn desk_fixture() -> Fixture {
    let dims = ModelDims::default();
    let (model, subspace) = init_model::<f32>(&dims, 0, true).expect("default dims are valid");
    let (b, n) = (8, dims.n_max);
    let tokens: Vec<u32> = (0..b * n).map(|i| (i * 37 % dims.vocab) as u32).collect();
    let input = model.embeddings.embed(&tokens, b, n).expect("token shape");
    let boundary = boundary_activations(&model, &tokens, b, n)
        .expect("token shape")
        .remove(0);
    Fixture {
        model,
        subspace,
        tokens,
        b,
        n,
        input,
        boundary,
    }
}
