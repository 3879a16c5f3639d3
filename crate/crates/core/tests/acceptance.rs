//! End-to-end acceptance checks. Runs every criterion, prints one
//! `PASS`/`FAIL` line each and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use subpipe_core::codec::{
    decode_forward, encode_backward, encode_dense, encode_forward, forward_coefficients,
    reconstruct_forward,
};
use subpipe_core::experiments::{
    compare_codecs, error_accumulation, rank_diagnostic, sampler, Injection, Trainer,
};
use subpipe_core::model::{
    backward_block, forward_block, grad_flow_invariance, LayerParams, ModelGrads,
};
use subpipe_core::optim::{adamw_step, AdamConfig, MomentState};
use subpipe_core::pipeline::{sample_bandwidth, shape_delay, ShaperConfig};
use subpipe_core::subspace::{distortion_bound_check, GrassmannAccumulator};
use subpipe_core::{LossyCodec, Matrix, Mode, Model, MsgType, RunConfig, Subspace, Tensor3};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn out_dir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

fn config(dir: &tempfile::TempDir) -> RunConfig {
    RunConfig {
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    }
}

fn max_abs_diff<T: subpipe_core::Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()))
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    let den = b.frobenius_norm() as f64;
    let num = a.sub(b).unwrap().frobenius_norm() as f64;
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let a = Matrix::<f64>::gaussian(2 * d, d, 1.0, rng);
    a.t_matmul(&a).unwrap().scale(1.0 / (2 * d) as f64)
}

fn orthonormality_error<T: subpipe_core::Real>(u: &Matrix<T>) -> f64 {
    let u = u.cast::<f64>();
    u.t_matmul(&u)
        .unwrap()
        .sub(&Matrix::identity(u.cols()))
        .unwrap()
        .frobenius_norm()
}

fn lossless_codec() -> Outcome {
    let dir = out_dir();
    let mut cfg = config(&dir);
    cfg.plan.steps = 500;
    cfg.plan.grassmann_period = 100;
    let mut trainer = Trainer::new(&cfg).unwrap();
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut versions = Vec::new();
    for _ in 0..5 {
        trainer.run(100).unwrap();
        let state = trainer.snapshot().unwrap();
        versions.push(state.subspace.version());
        let batch = trainer.next_batch();
        let (tokens, b, n) = (&batch.tokens, batch.b, batch.n);
        let m = &state.model;
        let last = m.num_layers() - 1;

        // Each block consumes the decoded output of the one before, as the
        // receiving stage would.
        let mut h = m.embeddings.embed(tokens, b, n).unwrap();
        for l in 0..last {
            let x = forward_block(&m.layers[l], l, &h).unwrap().0;
            let frame = encode_forward(&x, tokens, l, 0, &m.embeddings, &state.subspace).unwrap();
            h = decode_forward(&frame, &m.embeddings, &state.subspace).unwrap();
            worst32 = worst32.max(max_abs_diff(&h, &x));
        }

        let s64 = state.subspace.cast::<f64>().reorthonormalized().unwrap();
        let mut m64 = m.cast::<f64>();
        m64.project_onto(&s64).unwrap();
        let mut h = m64.embeddings.embed(tokens, b, n).unwrap();
        for l in 0..last {
            let x = forward_block(&m64.layers[l], l, &h).unwrap().0;
            let c = forward_coefficients(&x, tokens, &m64.embeddings, &s64).unwrap();
            h = reconstruct_forward(&c, s64.version(), tokens, &m64.embeddings, &s64).unwrap();
            worst64 = worst64.max(max_abs_diff(&h, &x));
        }
    }
    outcome(
        worst32 <= 1e-5 && worst64 <= 1e-12,
        format!("max |decode(encode(X)) - X| f32 {worst32:.3e} (<= 1e-5), f64 {worst64:.3e} (<= 1e-12), subspace versions {versions:?}"),
    )
}

/// Projects the gradients of constrained tensors the way the optimizer
/// does, which removes the parts a compressed boundary cannot carry.
fn constrained_part(g: &ModelGrads, model: &Model, s: &Subspace) -> ModelGrads {
    let mut g = g.clone();
    for (l, lg) in g.layers.iter_mut().enumerate() {
        if model.layer_constrained(l) {
            lg.project_onto(s).unwrap();
        }
    }
    g.token_low = s.project_matrix_rows(&g.token_low).unwrap();
    g
}

fn distributed_matches_monolithic() -> Outcome {
    let dir = out_dir();
    let mut cfg = config(&dir);
    cfg.plan.steps = 50;
    cfg.plan.grassmann_period = 10;
    let mut piped = Trainer::new(&cfg).unwrap();
    let mut batches = sampler(&cfg).unwrap();
    let (mut loss_err, mut grad_err) = (0.0f64, 0.0f64);
    let mut worst_tensor = 0;
    for _ in 0..cfg.plan.steps {
        let state = piped.snapshot().unwrap();
        let batch = batches.next_batch(cfg.plan.batch);
        let (loss, reference) = state
            .model
            .loss_and_grads(&batch.tokens, &batch.targets, batch.b, batch.n)
            .unwrap();
        let report = piped.step_with(true).unwrap();
        loss_err = loss_err.max((report.loss - loss as f64).abs() / (loss as f64).abs());
        let got = constrained_part(
            report.grads.as_ref().unwrap(),
            &state.model,
            &state.subspace,
        );
        let want = constrained_part(&reference, &state.model, &state.subspace);
        // Positional embeddings are frozen in compressed mode.
        let skip = 6 * state.model.num_layers() + 1;
        for (i, (x, y)) in got.tensors().into_iter().zip(want.tensors()).enumerate() {
            if i == skip {
                continue;
            }
            let e = rel(x, y);
            if e > grad_err {
                grad_err = e;
                worst_tensor = i;
            }
        }
    }
    let version = piped.finish().unwrap().subspace.version();

    let mut single = cfg.clone();
    single.stages = 1;
    let mut one = Trainer::new(&single).unwrap();
    let mut four = Trainer::new(&cfg).unwrap();
    one.run(cfg.plan.steps).unwrap();
    four.run(cfg.plan.steps).unwrap();
    let same_params = one.finish().unwrap().model == four.finish().unwrap().model;
    outcome(
        loss_err <= 1e-5 && grad_err <= 1e-5 && same_params,
        format!(
            "4-stage pipeline vs monolithic model over 50 steps: loss rel {loss_err:.3e}, gradient rel {grad_err:.3e} (worst tensor {worst_tensor}) (<= 1e-5); 1- and 4-stage parameters identical: {same_params}; subspace version {version}"
        ),
    )
}

fn gradient_flow_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = Subspace::<f32>::random(64, 8, &mut rng).unwrap();
        let wp2 = s
            .project_matrix_rows(&Matrix::gaussian(256, 64, 0.1, &mut rng))
            .unwrap();
        let g = Tensor3::from_matrix(Matrix::gaussian(16, 64, 1.0, &mut rng), 2, 8).unwrap();
        let err = grad_flow_invariance(&wp2, &g, &s).unwrap() as f64;
        let scale = g.matmul_t(&wp2).unwrap().frobenius_norm() as f64;
        worst = worst.max(err / scale);
    }
    outcome(
        worst <= 1e-5,
        format!("1000 pairs, worst relative difference {worst:.3e} (<= 1e-5)"),
    )
}

fn weighted_sum(y: &Tensor3<f64>, w: &Tensor3<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn rel_vec(analytic: &[f64], numeric: &[f64]) -> f64 {
    let num: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let den: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn finite_difference_backward() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = LayerParams::<f64>::gaussian(8, 32, 2, 0.3, &mut rng);
        let x = Tensor3::from_matrix(Matrix::gaussian(6, 8, 1.0, &mut rng), 2, 3).unwrap();
        let w = Tensor3::from_matrix(Matrix::gaussian(6, 8, 1.0, &mut rng), 2, 3).unwrap();
        let (_, stash) = forward_block(&p, 0, &x).unwrap();
        let (dx, grads) = backward_block(&p, &stash, &w).unwrap();
        let f = |p: &LayerParams<f64>, x: &Tensor3<f64>| {
            weighted_sum(&forward_block(p, 0, x).unwrap().0, &w)
        };
        for (t, name) in ["wq", "wk", "wv", "wp1", "w1", "wp2"]
            .into_iter()
            .enumerate()
        {
            let numeric: Vec<f64> = (0..p.tensors()[t].data().len())
                .map(|i| {
                    let mut plus = p.clone();
                    plus.tensors_mut()[t].data_mut()[i] += h;
                    let mut minus = p.clone();
                    minus.tensors_mut()[t].data_mut()[i] -= h;
                    (f(&plus, &x) - f(&minus, &x)) / (2.0 * h)
                })
                .collect();
            let e = rel_vec(grads.tensors()[t].data(), &numeric);
            if e > worst {
                worst = e;
                worst_name = name;
            }
        }
        let numeric: Vec<f64> = (0..x.data().len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&p, &plus) - f(&p, &minus)) / (2.0 * h)
            })
            .collect();
        let e = rel_vec(dx.data(), &numeric);
        if e > worst {
            worst = e;
            worst_name = "input";
        }
    }
    outcome(
        worst <= 1e-3,
        format!("d=8 H=2 n=3 block, worst relative error {worst:.3e} on {worst_name} (<= 1e-3)"),
    )
}

fn subspace_preservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = Subspace::<f32>::random(64, 8, &mut rng).unwrap();
    let w0 = s
        .project_matrix_rows(&Matrix::gaussian(256, 64, 0.05, &mut rng))
        .unwrap();
    let cfg = AdamConfig::default();
    let (mut w_rc, mut w_std) = (w0.clone(), w0);
    let mut st_rc = MomentState::like(&w_rc, true);
    let mut st_std = MomentState::like(&w_std, false);
    let mut worst_rc = 0.0f64;
    for _ in 0..1000 {
        let g = Matrix::<f32>::gaussian(256, 8, 1.0, &mut rng)
            .matmul_t(s.basis())
            .unwrap();
        adamw_step(&mut w_rc, &g, &mut st_rc, &cfg, 1e-3).unwrap();
        adamw_step(&mut w_std, &g, &mut st_std, &cfg, 1e-3).unwrap();
        worst_rc = worst_rc.max(s.off_subspace_ratio(&w_rc).unwrap() as f64);
    }
    let final_std = s.off_subspace_ratio(&w_std).unwrap() as f64;
    outcome(
        worst_rc <= 1e-5 && final_std > 1e-3,
        format!("1000 steps: row-constant max off-subspace ratio {worst_rc:.3e} (<= 1e-5), standard {final_std:.3e} (> 1e-3)"),
    )
}

fn grassmann_machinery() -> Outcome {
    let (d, k) = (64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let mut u32s = Subspace::<f32>::random(d, k, &mut rng).unwrap();
    let mut u64s = Subspace::<f64>::random(d, k, &mut rng).unwrap();
    let mut ortho = 0.0f64;
    for _ in 0..100 {
        let s = random_psd(d, &mut rng);
        let acc64 = GrassmannAccumulator::from_parts(s.clone(), 1).unwrap();
        let acc32 = GrassmannAccumulator::from_parts(s.cast::<f32>(), 1).unwrap();
        u64s = u64s.grassmann_step(&acc64, 0.1).unwrap();
        u32s = u32s.grassmann_step(&acc32, 0.1).unwrap();
        ortho = ortho
            .max(orthonormality_error(u64s.basis()))
            .max(orthonormality_error(u32s.basis()));
    }

    let mut grad_err = 0.0f64;
    let h = 1e-6;
    for _ in 0..10 {
        let s = random_psd(d, &mut rng);
        let u = Subspace::<f64>::random(d, k, &mut rng).unwrap();
        let analytic = u.euclidean_gradient(&s).unwrap();
        let energy = |b: &Matrix<f64>| -b.t_matmul(&s.matmul(b).unwrap()).unwrap().trace();
        let mut numeric = Matrix::<f64>::zeros(d, k);
        for i in 0..d * k {
            let mut plus = u.basis().clone();
            plus.data_mut()[i] += h;
            let mut minus = u.basis().clone();
            minus.data_mut()[i] -= h;
            numeric.data_mut()[i] = (energy(&plus) - energy(&minus)) / (2.0 * h);
        }
        grad_err = grad_err
            .max(analytic.sub(&numeric).unwrap().frobenius_norm() / numeric.frobenius_norm());
    }

    let mut decreases = 0;
    let mut steps = 0;
    for eta in [1e-3, 1e-4] {
        for _ in 0..100 {
            let s = random_psd(d, &mut rng);
            let acc = GrassmannAccumulator::from_parts(s.clone(), 1).unwrap();
            let mut u = Subspace::<f64>::random(d, k, &mut rng).unwrap();
            let mut energy = u.captured_energy(&s).unwrap();
            for _ in 0..5 {
                u = u.grassmann_step(&acc, eta).unwrap();
                let next = u.captured_energy(&s).unwrap();
                steps += 1;
                if next < energy {
                    decreases += 1;
                }
                energy = next;
            }
        }
    }
    outcome(
        ortho <= 1e-6 && grad_err <= 1e-4 && decreases == 0,
        format!(
            "max ||U^T U - I||_F {ortho:.3e} (<= 1e-6), gradient vs finite differences {grad_err:.3e} (<= 1e-4), energy decreases {decreases}/{steps}"
        ),
    )
}

fn payload_ratio(d: usize, k: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let s = Subspace::<f32>::random(d, k, rng).unwrap();
    let g = Tensor3::from_matrix(Matrix::gaussian(4, d, 1.0, rng), 2, 2).unwrap();
    let compressed = encode_backward(&g, 0, 0, &s).unwrap();
    let dense = encode_dense(MsgType::Backward, &g, 0, 0).unwrap();
    let payload = dense.payload.len() as f64 / compressed.payload.len() as f64;
    let total = dense.wire_len() as f64 / compressed.wire_len() as f64;
    (payload, total)
}

fn compression_ratio() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (desk, desk_total) = payload_ratio(64, 8, &mut rng);
    let (large, large_total) = payload_ratio(4096, 40, &mut rng);
    outcome(
        desk == 8.0 && large == 4096.0 / 40.0 && (100.0..=103.0).contains(&large),
        format!(
            "payload ratio d=64 k=8: {desk} (total bytes {desk_total:.3}); d=4096 k=40: {large} (total bytes {large_total:.3})"
        ),
    )
}

fn error_accumulation_bound() -> Outcome {
    let dir = out_dir();
    let cfg = config(&dir);
    let ratio = cfg.dims.d as f64 / cfg.dims.k as f64;
    let s = error_accumulation(
        &cfg,
        Injection::Codec {
            codec: LossyCodec::TopK,
            ratio,
        },
        100,
    )
    .unwrap();
    let grows = s.min_nu_hat <= 1.0 || s.monotone_fraction == 1.0;
    outcome(
        s.violations == 0 && grows,
        format!(
            "100 trials: {} bound violations, max measured/bound {:.3}, min nu_hat {:.3}, monotone trials {:.0}%, mean error by boundary {:?}",
            s.violations,
            s.max_ratio,
            s.min_nu_hat,
            100.0 * s.monotone_fraction,
            s.mean_by_layer.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>()
        ),
    )
}

fn distortion_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0;
    for _ in 0..100_000 {
        let n = rng.random_range(1..=32);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        if a.iter().all(|&x| x == 0.0) {
            continue;
        }
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let c = distortion_bound_check(&a, &v).unwrap();
        if !(c.holds && c.alt_holds) {
            failures += 1;
        }
    }
    let mut equality = 0.0f64;
    for m in [0.5, 1.0, 2.0, 7.0] {
        let c = distortion_bound_check(&[1.0, 1.0], &[m, 3.0 * m]).unwrap();
        equality = equality.max((c.lhs - c.rhs).abs() / c.rhs);
    }
    outcome(
        failures == 0 && equality <= 1e-12,
        format!("1e5 trials: {failures} failures; equality case a=[1,1], v=[m,3m] relative gap {equality:.3e}"),
    )
}

fn shaper_statistics() -> Outcome {
    let cfg = ShaperConfig::default();
    let b = cfg.bandwidth_bps;
    let (mu, sigma, floor) = (b, cfg.jitter * b, cfg.floor * b);
    let alpha = (floor - mu) / sigma;
    let z = Normal::new(0.0, 1.0).unwrap();
    let (below, density) = (z.cdf(alpha), z.pdf(alpha));
    let mean = floor * below + mu * (1.0 - below) + sigma * density;
    let second = floor * floor * below
        + (mu * mu + sigma * sigma) * (1.0 - below)
        + sigma * (mu + floor) * density;
    let std = (second - mean * mean).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 100_000;
    let samples: Vec<f64> = (0..n).map(|_| sample_bandwidth(&cfg, &mut rng)).collect();
    let m = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt();
    let below_floor = samples.iter().filter(|&&x| x < floor).count();

    let fixed = ShaperConfig { jitter: 0.0, ..cfg };
    let delay = shape_delay(1_000_000, &fixed, &mut rng);
    let mean_err = (m - mean).abs() / mean;
    let std_err = (sd - std).abs() / std;
    outcome(
        mean_err <= 0.01 && std_err <= 0.05 && below_floor == 0 && delay == 0.1,
        format!(
            "mean off by {:.3}% (<= 1%), std off by {:.3}% (<= 5%), {below_floor} samples under the floor, 1 MB at 80 Mbps takes {delay} s",
            100.0 * mean_err,
            100.0 * std_err
        ),
    )
}

fn throughput_analog() -> Outcome {
    let dir = out_dir();
    let mut cfg = config(&dir);
    cfg.compute_flops = 0.0;
    let time = |mode: Mode| {
        let mut c = cfg.clone();
        c.mode = mode;
        let mut t = Trainer::new(&c).unwrap();
        let total: f64 = t.run(20).unwrap().iter().map(|r| r.virtual_time).sum();
        t.finish().unwrap();
        total
    };
    let compressed = time(Mode::Compressed);
    let uncompressed = time(Mode::Uncompressed);
    let ratio = uncompressed / compressed;
    let target = cfg.dims.d as f64 / cfg.dims.k as f64;
    outcome(
        (ratio - target).abs() <= 0.05 * target,
        format!(
            "virtual transfer time uncompressed {uncompressed:.4} s / compressed {compressed:.4} s = {ratio:.3} (target {target} +/- 5%)"
        ),
    )
}

fn rank_collapse() -> Outcome {
    let dir = out_dir();
    let mut cfg = config(&dir);
    cfg.plan.steps = 2000;
    let s = rank_diagnostic(&cfg).unwrap();
    let ratios: Vec<f64> = s
        .final_p2
        .iter()
        .zip(&s.initial_p2)
        .map(|(f, i)| f / i)
        .collect();
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.2}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    outcome(
        ratios.iter().all(|&r| r <= 0.5),
        format!(
            "{} corpus bytes, W_p2 stable rank {} -> {} (worst ratio {:.3}, <= 0.5), loss {:.3} -> {:.3}",
            cfg.synthetic_corpus_bytes,
            fmt(&s.initial_p2),
            fmt(&s.final_p2),
            s.worst_p2_ratio(),
            s.first_loss,
            s.final_loss
        ),
    )
}

fn codec_comparison() -> Outcome {
    let dir = out_dir();
    let cfg = config(&dir);
    let s = compare_codecs(&cfg, false).unwrap();
    let subspace = s.max_mse("subspace");
    let lossy: Vec<(&str, f64)> = ["topk", "quantize", "svd"]
        .into_iter()
        .map(|c| (c, s.min_mse(c)))
        .collect();
    outcome(
        subspace <= 1e-10 && lossy.iter().all(|&(_, e)| e > 1e-3),
        format!(
            "relative MSE at budget d/k: subspace max {subspace:.3e} (<= 1e-10); lossy minima {} (each > 1e-3)",
            lossy.iter().map(|(c, e)| format!("{c} {e:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

type Criterion = (u32, &'static str, Option<Duration>, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 13] = [
        (
            1,
            "lossless codec",
            Some(Duration::from_secs(60)),
            lossless_codec,
        ),
        (
            2,
            "distributed equals monolithic",
            Some(Duration::from_secs(300)),
            distributed_matches_monolithic,
        ),
        (
            3,
            "gradient-flow invariance",
            None,
            gradient_flow_invariance,
        ),
        (
            4,
            "finite-difference backward",
            None,
            finite_difference_backward,
        ),
        (
            5,
            "subspace preservation without projection",
            None,
            subspace_preservation,
        ),
        (6, "grassmann machinery", None, grassmann_machinery),
        (7, "compression ratio", None, compression_ratio),
        (
            8,
            "error accumulation bound",
            None,
            error_accumulation_bound,
        ),
        (9, "orthogonal distortion bound", None, distortion_bound),
        (10, "shaper statistics", None, shaper_statistics),
        (11, "throughput analog", None, throughput_analog),
        (
            12,
            "rank collapse",
            Some(Duration::from_secs(900)),
            rank_collapse,
        ),
        (13, "codec comparison", None, codec_comparison),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (id, name, limit, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let elapsed = start.elapsed();
        let (mut pass, mut detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if let Some(limit) = limit {
            if elapsed > limit {
                pass = false;
                detail.push_str(&format!("; over the {} s runtime limit", limit.as_secs()));
            }
        }
        println!(
            "criterion {id:>2} {name}: {} ({detail}) [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
