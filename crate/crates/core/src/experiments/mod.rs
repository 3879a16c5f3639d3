//! Experiment drivers shared by the command line and the acceptance tests.
//! Each writes its CSVs and a `summary.txt` into the configured output
//! directory.

mod codecs;
mod error_accum;
mod rank;

pub use codecs::{codec_table, compare_codecs, CodecRow, CodecSummary};
pub use error_accum::{error_accumulation, jacobian_norm, ErrorAccumSummary, ErrorRow, Injection};
pub use rank::{rank_diagnostic, RankRow, RankSummary};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{ingest_corpus, synthetic_corpus, tokenize, WindowSampler};
use crate::error::Result;
use crate::linalg::{Real, Tensor3};
use crate::model::{forward_block, init_model, Model};
use crate::pipeline::{
    Batch, MetricsWriter, Pipeline, PipelineOptions, StageSettings, StepReport, StepRequest,
    TrainState,
};

const DATA_SEED_SALT: u64 = 0x6461_7461;

/// Token stream for a run: the configured corpus, or synthetic text seeded
/// by the run seed.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<u32>> {
    match &cfg.corpus {
        Some(path) => ingest_corpus(path),
        None => Ok(tokenize(&synthetic_corpus(
            cfg.synthetic_corpus_bytes,
            cfg.seed,
        ))),
    }
}

pub fn sampler(cfg: &RunConfig) -> Result<WindowSampler> {
    WindowSampler::new(load_corpus(cfg)?, cfg.plan.seq, cfg.seed ^ DATA_SEED_SALT)
}

pub fn pipeline_options(cfg: &RunConfig) -> PipelineOptions {
    PipelineOptions {
        stages: cfg.stages,
        transport: cfg.transport(),
        settings: StageSettings {
            mode: cfg.mode,
            adam: cfg.optim,
            grassmann_eta: cfg.plan.grassmann_eta,
            shaper: cfg.shaper,
            realtime: cfg.realtime,
            train_positional: cfg.train_positional,
        },
        compute_flops: cfg.compute_flops,
        log_frames: cfg.log_frames,
    }
}

/// Outputs of layers `0..L-1`, the tensors that cross boundaries.
pub fn boundary_activations<T: Real>(
    model: &Model<T>,
    tokens: &[u32],
    b: usize,
    n: usize,
) -> Result<Vec<Tensor3<T>>> {
    let mut x = model.embeddings.embed(tokens, b, n)?;
    let mut out = Vec::with_capacity(model.num_layers().saturating_sub(1));
    for (l, p) in model.layers.iter().enumerate() {
        x = forward_block(p, l, &x)?.0;
        if l + 1 < model.num_layers() {
            out.push(x.clone());
        }
    }
    Ok(out)
}

/// Drives a pipeline over a corpus with the configured schedule.
pub struct Trainer {
    cfg: RunConfig,
    sampler: WindowSampler,
    pipeline: Option<Pipeline>,
    step: u64,
    metrics: Option<MetricsWriter<BufWriter<File>>>,
    frames: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, subspace) = init_model::<f32>(&cfg.dims, cfg.seed, cfg.constrained())?;
        Ok(Self {
            cfg: cfg.clone(),
            sampler: sampler(cfg)?,
            pipeline: Some(Pipeline::launch(&model, &subspace, pipeline_options(cfg))?),
            step: 0,
            metrics: None,
            frames: None,
        })
    }

    /// Streams per-step metrics to `metrics.csv`, and frames to
    /// `frames.bin` when frame logging is on.
    pub fn with_outputs(mut self) -> Result<Self> {
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        let file = BufWriter::new(File::create(self.cfg.out_dir.join("metrics.csv"))?);
        self.metrics = Some(MetricsWriter::new(file, self.cfg.dims.layers)?);
        if self.cfg.log_frames {
            self.frames = Some(BufWriter::new(File::create(
                self.cfg.out_dir.join("frames.bin"),
            )?));
        }
        Ok(self)
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Draws a batch without training on it.
    pub fn next_batch(&mut self) -> Batch {
        self.sampler.next_batch(self.cfg.plan.batch)
    }

    pub fn step_with(&mut self, report_grads: bool) -> Result<StepReport> {
        let plan = self.cfg.plan;
        let step = self.step;
        let batch = self.sampler.next_batch(plan.batch);
        let req = StepRequest {
            step,
            lr: self.cfg.optim.lr_at(step, plan.steps),
            microbatches: plan.microbatches,
            grassmann_update: (step + 1) % plan.grassmann_period == 0,
            collect_stats: step % plan.stats_every == 0 || step + 1 == plan.steps,
            report_grads,
        };
        let pipeline = self.pipeline.as_mut().expect("pipeline is running");
        let report = pipeline.step(&batch, req)?;
        if let Some(m) = self.metrics.as_mut() {
            m.record(&report)?;
        }
        if let Some(f) = self.frames.as_mut() {
            f.write_all(&pipeline.drain_frame_log())?;
        }
        self.step += 1;
        Ok(report)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        self.step_with(false)
    }

    /// Runs `count` steps and returns their reports.
    pub fn run(&mut self, count: u64) -> Result<Vec<StepReport>> {
        (0..count).map(|_| self.step()).collect()
    }

    /// Stops the workers, captures the full state and restarts them from
    /// it. Training continues identically; only the shaper streams restart.
    pub fn snapshot(&mut self) -> Result<TrainState> {
        let state = self
            .pipeline
            .take()
            .expect("pipeline is running")
            .finish_state(self.step)?;
        self.pipeline = Some(Pipeline::resume(&state, pipeline_options(&self.cfg))?);
        Ok(state)
    }

    pub fn finish(mut self) -> Result<TrainState> {
        if let Some(m) = self.metrics.take() {
            m.into_inner()?;
        }
        if let Some(mut f) = self.frames.take() {
            f.flush()?;
        }
        self.pipeline
            .take()
            .expect("pipeline is running")
            .finish_state(self.step)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub bytes_fwd: u64,
    pub bytes_bwd: u64,
    pub virtual_time: f64,
    pub subspace_version: u32,
}

impl TrainSummary {
    pub fn from_reports(reports: &[StepReport]) -> Self {
        Self {
            steps: reports.len() as u64,
            first_loss: reports.first().map_or(f64::NAN, |r| r.loss),
            final_loss: reports.last().map_or(f64::NAN, |r| r.loss),
            bytes_fwd: reports.iter().map(|r| r.bytes_fwd as u64).sum(),
            bytes_bwd: reports.iter().map(|r| r.bytes_bwd as u64).sum(),
            virtual_time: reports.iter().map(|r| r.virtual_time).sum(),
            subspace_version: reports.last().map_or(0, |r| r.subspace_version),
        }
    }

    pub fn tps(&self, tokens_per_step: usize) -> f64 {
        if self.virtual_time > 0.0 {
            (tokens_per_step as u64 * self.steps) as f64 / self.virtual_time
        } else {
            f64::INFINITY
        }
    }
}

pub(crate) fn write_summary(dir: &Path, line: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("summary.txt");
    std::fs::write(&path, format!("{line}\n"))?;
    Ok(path)
}

/// Trains with the configured pipeline, writing `metrics.csv`,
/// `summary.txt`, optionally `frames.bin` and `checkpoint.bin`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(cfg)?.with_outputs()?;
    let reports = trainer.run(cfg.plan.steps)?;
    let state = trainer.finish()?;
    if cfg.save_checkpoint {
        checkpoint::save(&cfg.out_dir.join("checkpoint.bin"), &state)?;
    }
    let s = TrainSummary::from_reports(&reports);
    write_summary(
        &cfg.out_dir,
        &format!(
            "train mode={} stages={} steps={} first_loss={} final_loss={} bytes_fwd={} bytes_bwd={} virtual_time={} tps={} subspace_version={}",
            cfg.mode,
            cfg.stages,
            s.steps,
            s.first_loss,
            s.final_loss,
            s.bytes_fwd,
            s.bytes_bwd,
            s.virtual_time,
            s.tps(cfg.plan.batch * cfg.plan.seq),
            s.subspace_version
        ),
    )?;
    Ok(s)
}
