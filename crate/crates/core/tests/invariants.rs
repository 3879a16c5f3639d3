use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subpipe_core::codec::{decode_forward, encode_forward};
use subpipe_core::linalg::{qr_thin, stable_rank};
use subpipe_core::model::init_model;
use subpipe_core::optim::row_constant_second_moment;
use subpipe_core::subspace::distortion_bound_check;
use subpipe_core::{CompressedFrame, Matrix, ModelDims, MsgType, Subspace, Tensor3};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn orthonormality_error(q: &Matrix<f64>) -> f64 {
    q.t_matmul(q)
        .unwrap()
        .sub(&Matrix::identity(q.cols()))
        .unwrap()
        .frobenius_norm()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn qr_factors_are_orthonormal_and_exact(seed in any::<u64>(), rows in 1usize..24, extra in 0usize..8) {
        let cols = rows.saturating_sub(extra).max(1);
        let a = Matrix::<f64>::gaussian(rows, cols, 1.0, &mut rng(seed));
        let (q, r) = qr_thin(&a).unwrap();
        prop_assert!(orthonormality_error(&q) <= 1e-10);
        prop_assert!(q.matmul(&r).unwrap().sub(&a).unwrap().max_abs() <= 1e-10);
        for i in 0..cols {
            for j in 0..i {
                prop_assert_eq!(r.data()[i * cols + j], 0.0);
            }
        }
    }

    #[test]
    fn random_subspaces_are_orthonormal(seed in any::<u64>(), d in 2usize..40, k in 1usize..8) {
        let k = k.min(d - 1);
        let s = Subspace::<f64>::random(d, k, &mut rng(seed)).unwrap();
        prop_assert!(orthonormality_error(s.basis()) <= 1e-10);
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), d in 2usize..24, k in 1usize..6, rows in 1usize..6) {
        let k = k.min(d - 1);
        let mut r = rng(seed);
        let s = Subspace::<f64>::random(d, k, &mut r).unwrap();
        let x = Tensor3::from_matrix(Matrix::gaussian(rows * 2, d, 1.0, &mut r), 2, rows).unwrap();
        let once = s.project_rows(&x).unwrap();
        let twice = s.project_rows(&once).unwrap();
        prop_assert!(twice.sub(&once).unwrap().frobenius_norm() <= 1e-10 * (1.0 + x.frobenius_norm()));
        let back = s.decompress(&s.compress(&once).unwrap(), s.version()).unwrap();
        prop_assert!(back.sub(&once).unwrap().frobenius_norm() <= 1e-10 * (1.0 + x.frobenius_norm()));
        let w = Matrix::<f64>::gaussian(d + 1, d, 1.0, &mut r);
        let pw = s.project_matrix_rows(&w).unwrap();
        prop_assert!(s.off_subspace_ratio(&pw).unwrap() <= 1e-10);
    }

    #[test]
    fn stable_rank_is_orthogonally_invariant(seed in any::<u64>(), rows in 2usize..20, cols in 2usize..20) {
        let mut r = rng(seed);
        let a = Matrix::<f64>::gaussian(rows, cols, 1.0, &mut r);
        let sr = stable_rank(&a).unwrap();
        prop_assert!(sr >= 1.0 - 1e-12 && sr <= rows.min(cols) as f64 + 1e-9);
        let (ql, _) = qr_thin(&Matrix::<f64>::gaussian(rows, rows, 1.0, &mut r)).unwrap();
        let (qr, _) = qr_thin(&Matrix::<f64>::gaussian(cols, cols, 1.0, &mut r)).unwrap();
        let rotated = ql.matmul(&a).unwrap().matmul(&qr).unwrap();
        prop_assert!((stable_rank(&rotated).unwrap() - sr).abs() <= 1e-5 * sr);
    }

    #[test]
    fn distortion_bound_holds(
        a in prop::collection::vec(-10.0f64..10.0, 1..16),
        v in prop::collection::vec(0.01f64..10.0, 16),
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-6));
        let c = distortion_bound_check(&a, &v[..a.len()]).unwrap();
        prop_assert!(c.holds, "{:?}", c);
        prop_assert!(c.alt_holds, "{:?}", c);
    }

    #[test]
    fn row_constant_moment_keeps_row_means(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10) {
        let v = Matrix::<f64>::gaussian(rows, cols, 1.0, &mut rng(seed)).map(|x| x * x);
        let c = row_constant_second_moment(&v);
        for r in 0..rows {
            let row = c.row(r);
            let mean: f64 = v.row(r).iter().sum::<f64>() / cols as f64;
            prop_assert!(row.iter().all(|&x| x == row[0]));
            prop_assert!((row[0] - mean).abs() <= 1e-12 * (1.0 + mean));
        }
    }

    #[test]
    fn frames_survive_serialization(
        layer in 0usize..1000,
        mb in 0usize..1000,
        version in any::<u32>(),
        b in 1usize..4,
        n in 1usize..5,
        k in 1usize..5,
        with_tokens in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let payload: Vec<f32> = Matrix::<f32>::gaussian(b * n, k, 1.0, &mut r).into_data();
        let tokens: Vec<u32> = if with_tokens { (0..(b * n) as u32).collect() } else { Vec::new() };
        let f = CompressedFrame::new(MsgType::Forward, layer, mb, version, (b, n, k), tokens, payload).unwrap();
        let bytes = f.serialize();
        prop_assert_eq!(bytes.len(), f.wire_len());
        prop_assert_eq!(CompressedFrame::deserialize(&bytes).unwrap(), f);
    }

    #[test]
    fn constrained_activations_round_trip(seed in 0u64..1000, b in 1usize..3, n in 1usize..6) {
        let dims = ModelDims { d: 16, d_ff: 32, heads: 2, layers: 3, vocab: 256, n_max: 8, k: 4 };
        let (model, s) = init_model::<f64>(&dims, seed, true).unwrap();
        let tokens: Vec<u32> = (0..b * n).map(|i| ((seed as usize * 31 + i * 7) % 256) as u32).collect();
        let mut x = model.embeddings.embed(&tokens, b, n).unwrap();
        for (l, p) in model.layers.iter().enumerate().take(2) {
            x = subpipe_core::model::forward_block(p, l, &x).unwrap().0;
            let f = encode_forward(&x, &tokens, l, 0, &model.embeddings, &s).unwrap();
            let y = decode_forward(&f, &model.embeddings, &s).unwrap();
            let err = y.sub(&x).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(err <= 1e-5 * (1.0 + x.frobenius_norm()), "layer {}: {}", l, err);
        }
    }
}
