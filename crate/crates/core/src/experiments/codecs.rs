use std::fmt::Write as _;

use crate::codec::{decode_forward, encode_forward, relative_mse, LossyCodec};
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::Model;
use crate::pipeline::{Batch, Mode};
use crate::subspace::Subspace;

use super::{boundary_activations, write_summary, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct CodecRow {
    pub codec: String,
    pub boundary: usize,
    pub ratio: f64,
    /// Bytes the codec puts on the wire for this boundary tensor,
    /// excluding the frame header.
    pub bytes: usize,
    pub relative_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecSummary {
    pub rows: Vec<CodecRow>,
    /// `(mode, per-step losses)` for each convergence run.
    pub losses: Vec<(String, Vec<f64>)>,
}

impl CodecSummary {
    pub fn max_mse(&self, codec: &str) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.codec == codec)
            .map(|r| r.relative_mse)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_mse(&self, codec: &str) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.codec == codec)
            .map(|r| r.relative_mse)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Relative reconstruction error of the subspace codec and of every lossy
/// baseline on each boundary activation of `model`, with the baselines held
/// to `dense / ratio` bytes.
pub fn codec_table(
    model: &Model,
    s: &Subspace,
    batch: &Batch,
    ratio: f64,
) -> Result<Vec<CodecRow>> {
    let acts = boundary_activations(model, &batch.tokens, batch.b, batch.n)?;
    let mut rows = Vec::new();
    for (l, x) in acts.iter().enumerate() {
        let frame = encode_forward(x, &batch.tokens, l, 0, &model.embeddings, s)?;
        let recon = decode_forward(&frame, &model.embeddings, s)?;
        rows.push(CodecRow {
            codec: "subspace".into(),
            boundary: l,
            ratio: (model.dims.d as f64) / (model.dims.k as f64),
            bytes: (frame.token_ids.len() + frame.payload.len()) * 4,
            relative_mse: relative_mse(&recon, x)?,
        });
        for codec in LossyCodec::ALL {
            let (approx, bytes) = codec.apply_at_ratio(x, ratio)?;
            rows.push(CodecRow {
                codec: codec.name().into(),
                boundary: l,
                ratio,
                bytes,
                relative_mse: relative_mse(&approx, x)?,
            });
        }
    }
    Ok(rows)
}

/// Trains a compressed model, then tabulates boundary reconstruction error
/// of every codec at the matched budget `d / k` on held-out activations.
/// With `convergence`, also trains uncompressed and lossy pipelines for
/// the same number of steps and records their losses.
pub fn compare_codecs(cfg: &RunConfig, convergence: bool) -> Result<CodecSummary> {
    let mut base = cfg.clone();
    base.mode = Mode::Compressed;
    base.train_positional = false;
    let mut trainer = Trainer::new(&base)?.with_outputs()?;
    let compressed: Vec<f64> = trainer
        .run(base.plan.steps)?
        .iter()
        .map(|r| r.loss)
        .collect();
    let held_out = trainer.next_batch();
    let state = trainer.finish()?;
    let ratio = cfg.dims.d as f64 / cfg.dims.k as f64;
    let rows = codec_table(&state.model, &state.subspace, &held_out, ratio)?;

    let mut losses = vec![(Mode::Compressed.to_string(), compressed)];
    if convergence {
        let mut modes = vec![Mode::Uncompressed];
        modes.extend(
            LossyCodec::ALL
                .iter()
                .map(|&codec| Mode::Lossy { codec, ratio }),
        );
        for mode in modes {
            let mut run_cfg = base.clone();
            run_cfg.mode = mode;
            let mut t = Trainer::new(&run_cfg)?;
            let l = t.run(run_cfg.plan.steps)?.iter().map(|r| r.loss).collect();
            t.finish()?;
            losses.push((mode.to_string(), l));
        }
    }

    let mut table = String::from("codec,boundary,ratio,bytes,relative_mse\n");
    for r in &rows {
        writeln!(
            table,
            "{},{},{},{},{}",
            r.codec, r.boundary, r.ratio, r.bytes, r.relative_mse
        )
        .expect("string");
    }
    std::fs::write(cfg.out_dir.join("codecs.csv"), table)?;
    if convergence {
        let mut csv = String::from("step,mode,loss\n");
        for (mode, l) in &losses {
            for (step, loss) in l.iter().enumerate() {
                writeln!(csv, "{step},{mode},{loss}").expect("string");
            }
        }
        std::fs::write(cfg.out_dir.join("convergence.csv"), csv)?;
    }
    let summary = CodecSummary { rows, losses };
    let mut line = format!("compare_codecs ratio={ratio}");
    for c in ["subspace", "topk", "quantize", "svd"] {
        write!(
            line,
            " {c}_max_mse={} {c}_min_mse={}",
            summary.max_mse(c),
            summary.min_mse(c)
        )
        .expect("string");
    }
    for (mode, l) in &summary.losses {
        write!(
            line,
            " final_loss[{mode}]={}",
            l.last().copied().unwrap_or(f64::NAN)
        )
        .expect("string");
    }
    write_summary(&cfg.out_dir, &line)?;
    Ok(summary)
}
