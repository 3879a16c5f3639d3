use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::error::Result;
use crate::linalg::{stable_rank, Matrix};
use crate::model::init_model;
use crate::pipeline::Mode;

use super::{write_summary, Trainer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankRow {
    pub step: u64,
    pub layer: usize,
    pub weight_p1: f64,
    pub weight_p2: f64,
    pub grad_p1: f64,
    pub grad_p2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankSummary {
    pub initial_p1: Vec<f64>,
    pub initial_p2: Vec<f64>,
    pub final_p1: Vec<f64>,
    pub final_p2: Vec<f64>,
    pub first_loss: f64,
    pub final_loss: f64,
    pub rows: Vec<RankRow>,
}

impl RankSummary {
    /// Largest `final / initial` stable-rank ratio over all `W_p2`.
    pub fn worst_p2_ratio(&self) -> f64 {
        self.final_p2
            .iter()
            .zip(&self.initial_p2)
            .map(|(f, i)| f / i)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn sr(m: &Matrix) -> f64 {
    stable_rank(m).unwrap_or(f64::NAN)
}

/// Trains the unconstrained model with dense boundaries and records the
/// stable rank of every `W_p1`, `W_p2` and of their gradients.
pub fn rank_diagnostic(cfg: &RunConfig) -> Result<RankSummary> {
    let mut run = cfg.clone();
    run.mode = Mode::Uncompressed;
    let (init, _) = init_model::<f32>(&run.dims, run.seed, false)?;
    let initial_p1: Vec<f64> = init.layers.iter().map(|p| sr(&p.wp1)).collect();
    let initial_p2: Vec<f64> = init.layers.iter().map(|p| sr(&p.wp2)).collect();

    let mut trainer = Trainer::new(&run)?.with_outputs()?;
    let mut rows = Vec::new();
    let (mut first_loss, mut final_loss) = (f64::NAN, f64::NAN);
    let mut csv = String::from(
        "step,layer,stable_rank_p1,stable_rank_p2,grad_stable_rank_p1,grad_stable_rank_p2\n",
    );
    for step in 0..run.plan.steps {
        let measure = step % run.plan.stats_every == 0 || step + 1 == run.plan.steps;
        let report = trainer.step_with(measure)?;
        if step == 0 {
            first_loss = report.loss;
        }
        final_loss = report.loss;
        if !measure {
            continue;
        }
        let grads = report.grads.as_ref().expect("gradients were requested");
        for s in &report.layer_stats {
            let g = &grads.layers[s.layer];
            let row = RankRow {
                step,
                layer: s.layer,
                weight_p1: s.stable_rank_p1,
                weight_p2: s.stable_rank_p2,
                grad_p1: sr(&g.wp1),
                grad_p2: sr(&g.wp2),
            };
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                row.step, row.layer, row.weight_p1, row.weight_p2, row.grad_p1, row.grad_p2
            )
            .expect("string");
            rows.push(row);
        }
    }
    let state = trainer.finish()?;
    std::fs::write(run.out_dir.join("rank.csv"), csv)?;
    let summary = RankSummary {
        initial_p1,
        initial_p2,
        final_p1: state.model.layers.iter().map(|p| sr(&p.wp1)).collect(),
        final_p2: state.model.layers.iter().map(|p| sr(&p.wp2)).collect(),
        first_loss,
        final_loss,
        rows,
    };
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    write_summary(
        &run.out_dir,
        &format!(
            "rank_diag steps={} first_loss={} final_loss={} initial_p1={} final_p1={} initial_p2={} final_p2={} worst_p2_ratio={}",
            run.plan.steps,
            summary.first_loss,
            summary.final_loss,
            fmt(&summary.initial_p1),
            fmt(&summary.final_p1),
            fmt(&summary.initial_p2),
            fmt(&summary.final_p2),
            summary.worst_p2_ratio()
        ),
    )?;
    Ok(summary)
}
