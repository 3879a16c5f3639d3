use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{error_bound, LossyCodec};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::Tensor3;
use crate::model::{backward_block, forward_block, init_model, lm_loss, LayerParams};

use super::{sampler, write_summary};

/// How a backward boundary perturbs the gradient it carries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Injection {
    /// Adds Gaussian noise scaled to `relative` times the gradient norm.
    Noise { relative: f64 },
    /// Round-trips the gradient through a lossy codec.
    Codec { codec: LossyCodec, ratio: f64 },
}

fn gaussian_like(x: &Tensor3<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor3<f64>> {
    let (b, n, d) = x.shape();
    Tensor3::from_vec(
        b,
        n,
        d,
        (0..b * n * d).map(|_| StandardNormal.sample(rng)).collect(),
    )
}

impl Injection {
    fn apply(&self, g: &Tensor3<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor3<f64>> {
        match *self {
            Injection::Noise { relative } => {
                let z = gaussian_like(g, rng)?;
                let scale = relative * g.frobenius_norm() / z.frobenius_norm();
                g.add(&z.scale(scale))
            }
            Injection::Codec { codec, ratio } => Ok(codec.apply_at_ratio(g, ratio)?.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRow {
    pub trial: usize,
    /// Block whose input gradient is measured; boundaries are `1..L`.
    pub layer: usize,
    /// `||accumulated error||_F`.
    pub measured: f64,
    pub bound: f64,
    pub nu_hat: f64,
    /// Largest injected per-boundary error norm in this trial.
    pub e: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorAccumSummary {
    pub rows: Vec<ErrorRow>,
    pub trials: usize,
    /// Rows with `measured > 1.1 bound`.
    pub violations: usize,
    pub max_ratio: f64,
    /// Mean measured error per boundary, indexed by block `1..L`.
    pub mean_by_layer: Vec<f64>,
    /// Fraction of trials whose error grows strictly at every boundary
    /// further from the loss.
    pub monotone_fraction: f64,
    pub min_nu_hat: f64,
}

impl ErrorAccumSummary {
    /// Whether the mean error strictly grows moving away from the loss.
    pub fn mean_is_monotone(&self) -> bool {
        self.mean_by_layer.windows(2).all(|w| w[0] > w[1])
    }
}

/// Largest singular value of the Jacobian of block `layer` at `x`, by power
/// iteration on `J^T J`. `J v` comes from central differences and `J^T u`
/// from the analytic backward pass. The estimate approaches the true norm
/// from below.
pub fn jacobian_norm(
    p: &LayerParams<f64>,
    layer: usize,
    x: &Tensor3<f64>,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (_, stash) = forward_block(p, layer, x)?;
    let mut v = gaussian_like(x, rng)?;
    v = v.scale(1.0 / v.frobenius_norm());
    let h = 1e-6 * x.frobenius_norm().max(1.0);
    let mut best = 0.0f64;
    for _ in 0..iters {
        let plus = forward_block(p, layer, &x.add(&v.scale(h))?)?.0;
        let minus = forward_block(p, layer, &x.sub(&v.scale(h))?)?.0;
        let jv = plus.sub(&minus)?.scale(0.5 / h);
        best = best.max(jv.frobenius_norm());
        let (jtjv, _) = backward_block(p, &stash, &jv)?;
        let norm = jtjv.frobenius_norm();
        if norm == 0.0 {
            break;
        }
        v = jtjv.scale(1.0 / norm);
    }
    Ok(best)
}

/// Backpropagates through an unconstrained model with every backward
/// boundary perturbed by `injection`, and compares the accumulated gradient
/// error at each boundary with the bound built from the largest injected
/// error and the measured Jacobian norms.
pub fn error_accumulation(
    cfg: &RunConfig,
    injection: Injection,
    trials: usize,
) -> Result<ErrorAccumSummary> {
    cfg.validate()?;
    let l_total = cfg.dims.layers;
    if l_total < 2 {
        return Err(Error::config(
            "dims.layers",
            "need at least two layers for a boundary",
        ));
    }
    let mut data = sampler(cfg)?;
    let b = cfg.plan.batch / cfg.plan.microbatches;
    let mut rows = Vec::new();
    let mut monotone = 0usize;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial as u64));
        let (model, _) = init_model::<f64>(&cfg.dims, cfg.seed.wrapping_add(trial as u64), false)?;
        let batch = data.next_batch(b);
        let mut x = model.embeddings.embed(&batch.tokens, b, batch.n)?;
        let mut inputs = Vec::with_capacity(l_total);
        let mut stashes = Vec::with_capacity(l_total);
        for (l, p) in model.layers.iter().enumerate() {
            inputs.push(x.clone());
            let (y, st) = forward_block(p, l, &x)?;
            stashes.push(st);
            x = y;
        }
        let (_, dlogits) = lm_loss(&x.matmul(&model.head)?, &batch.targets)?;
        let top = dlogits.matmul_t(&model.head)?;

        let mut exact = vec![Tensor3::zeros(0, 0, 0); l_total + 1];
        exact[l_total] = top.clone();
        for l in (0..l_total).rev() {
            exact[l] = backward_block(&model.layers[l], &stashes[l], &exact[l + 1])?.0;
        }
        let mut noisy = top;
        let mut measured = vec![0.0; l_total];
        let mut e = 0.0f64;
        for l in (1..l_total).rev() {
            let clean = backward_block(&model.layers[l], &stashes[l], &noisy)?.0;
            noisy = injection.apply(&clean, &mut rng)?;
            e = e.max(noisy.sub(&clean)?.frobenius_norm());
            measured[l] = noisy.sub(&exact[l])?.frobenius_norm();
        }
        // Errors injected at boundary j reach boundary l < j through blocks
        // l..j-1; only blocks 1..L-2 ever carry error.
        let mut nu = 0.0f64;
        for l in 1..l_total - 1 {
            nu = nu.max(jacobian_norm(
                &model.layers[l],
                l,
                &inputs[l],
                20,
                &mut rng,
            )?);
        }
        if l_total == 2 {
            nu = 1.0;
        }
        let boundaries = l_total - 1;
        for l in 1..l_total {
            rows.push(ErrorRow {
                trial,
                layer: l,
                measured: measured[l],
                bound: error_bound(e, nu, boundaries, l)?,
                nu_hat: nu,
                e,
            });
        }
        if (1..l_total - 1).all(|l| measured[l] > measured[l + 1]) {
            monotone += 1;
        }
    }
    let violations = rows.iter().filter(|r| r.measured > 1.1 * r.bound).count();
    let max_ratio = rows
        .iter()
        .map(|r| r.measured / r.bound)
        .fold(0.0, f64::max);
    let mean_by_layer: Vec<f64> = (1..l_total)
        .map(|l| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.layer == l)
                .map(|r| r.measured)
                .collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect();
    let summary = ErrorAccumSummary {
        trials,
        violations,
        max_ratio,
        monotone_fraction: if trials == 0 {
            0.0
        } else {
            monotone as f64 / trials as f64
        },
        min_nu_hat: rows.iter().map(|r| r.nu_hat).fold(f64::INFINITY, f64::min),
        mean_by_layer,
        rows,
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = String::from("trial,layer,measured,bound,nu_hat,e\n");
    for r in &summary.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.trial, r.layer, r.measured, r.bound, r.nu_hat, r.e
        )
        .expect("string");
    }
    std::fs::write(cfg.out_dir.join("error_accum.csv"), csv)?;
    write_summary(
        &cfg.out_dir,
        &format!(
            "error_accum injection={injection:?} trials={} violations={} max_ratio={} min_nu_hat={} monotone_fraction={} mean_by_layer={:?}",
            summary.trials,
            summary.violations,
            summary.max_ratio,
            summary.min_nu_hat,
            summary.monotone_fraction,
            summary.mean_by_layer
        ),
    )?;
    Ok(summary)
}
