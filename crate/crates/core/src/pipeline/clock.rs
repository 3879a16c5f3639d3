use crate::codec::MsgType;
use crate::model::ModelDims;

use super::stage::FrameRecord;

/// Floating-point operations of one block forward on a `b x n` microbatch.
pub fn block_forward_flops(dims: &ModelDims, b: usize, n: usize) -> f64 {
    let (d, d_ff) = (dims.d as f64, dims.d_ff as f64);
    let rows = (b * n) as f64;
    let projections = 2.0 * rows * 4.0 * d * d;
    let attention = 4.0 * b as f64 * (n * n) as f64 * d;
    let mlp = 4.0 * rows * d * d_ff;
    projections + attention + mlp
}

/// Forward and backward compute seconds per microbatch for each stage,
/// with the LM head charged to the last stage and backward costed at twice
/// the forward. A zero `flops_per_sec` makes compute free.
pub fn stage_compute_times(
    dims: &ModelDims,
    layers_per_stage: &[usize],
    b: usize,
    n: usize,
    flops_per_sec: f64,
) -> Vec<(f64, f64)> {
    if flops_per_sec <= 0.0 {
        return vec![(0.0, 0.0); layers_per_stage.len()];
    }
    let block = block_forward_flops(dims, b, n);
    let head = 2.0 * (b * n) as f64 * dims.d as f64 * dims.vocab as f64;
    let last = layers_per_stage.len().saturating_sub(1);
    layers_per_stage
        .iter()
        .enumerate()
        .map(|(s, &count)| {
            let fwd = block * count as f64 + if s == last { head } else { 0.0 };
            (fwd / flops_per_sec, 2.0 * fwd / flops_per_sec)
        })
        .collect()
}

/// Virtual duration of one GPipe step.
///
/// Every stage runs all microbatch forwards, then all backwards, one at a
/// time. A microbatch may start on a stage once its input frame has arrived;
/// each direction of each link carries one frame at a time. After the
/// optimizer barrier the subspace frame, if any, hops from the last stage to
/// stage 0.
pub fn step_time(
    num_stages: usize,
    microbatches: usize,
    frames: &[FrameRecord],
    compute: &[(f64, f64)],
) -> f64 {
    let links = num_stages.saturating_sub(1);
    let mut fwd_delay = vec![vec![0.0; microbatches]; links];
    let mut bwd_delay = vec![vec![0.0; microbatches]; links];
    let mut sub_delay = vec![None; links];
    for f in frames {
        if f.link >= links {
            continue;
        }
        match f.kind {
            MsgType::Forward if f.microbatch < microbatches => {
                fwd_delay[f.link][f.microbatch] = f.delay
            }
            MsgType::Backward if f.microbatch < microbatches => {
                bwd_delay[f.link][f.microbatch] = f.delay
            }
            MsgType::Subspace => sub_delay[f.link] = Some(f.delay),
            _ => {}
        }
    }
    let cost = |s: usize| compute.get(s).copied().unwrap_or((0.0, 0.0));

    let mut stage_free = vec![0.0f64; num_stages];
    let mut arrive = vec![0.0f64; microbatches];
    for s in 0..num_stages {
        let mut link_free = 0.0f64;
        let mut next = vec![0.0f64; microbatches];
        for mb in 0..microbatches {
            let start = stage_free[s].max(if s == 0 { 0.0 } else { arrive[mb] });
            stage_free[s] = start + cost(s).0;
            if s + 1 < num_stages {
                let send = stage_free[s].max(link_free);
                link_free = send + fwd_delay[s][mb];
                next[mb] = link_free;
            }
        }
        arrive = next;
    }
    for s in (0..num_stages).rev() {
        let mut link_free = 0.0f64;
        let mut next = vec![0.0f64; microbatches];
        for mb in 0..microbatches {
            let ready = if s + 1 == num_stages { 0.0 } else { arrive[mb] };
            let start = stage_free[s].max(ready);
            stage_free[s] = start + cost(s).1;
            if s > 0 {
                let send = stage_free[s].max(link_free);
                link_free = send + bwd_delay[s - 1][mb];
                next[mb] = link_free;
            }
        }
        arrive = next;
    }
    let mut t = stage_free.iter().copied().fold(0.0, f64::max);
    for link in (0..links).rev() {
        if let Some(delay) = sub_delay[link] {
            t += delay;
        }
    }
    t
}
