//! Multi-stage GPipe runtime: one worker thread per stage, frames over
//! in-process channels or TCP, a seeded bandwidth shaper and a virtual clock.

mod clock;
mod metrics;
mod shaper;
mod stage;
mod transport;

pub use clock::{block_forward_flops, stage_compute_times, step_time};
pub use metrics::{csv_header, csv_row, MetricsWriter};
pub use shaper::{sample_bandwidth, shape_delay, Direction, Shaper, ShaperConfig};
pub use stage::{
    FrameRecord, LayerStats, MicroBatch, Stage, StageCommand, StageGrads, StageReport,
    StageSettings,
};
pub use transport::{
    channel_pair, tcp_pair, ChannelEndpoint, Endpoint, FrameLog, Links, TcpEndpoint, Tee,
};

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::thread::JoinHandle;

use crossbeam::channel::{unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use crate::codec::{LossyCodec, MsgType};
use crate::error::{Error, Result};
use crate::model::{Model, ModelGrads};
use crate::optim::MomentState;
use crate::subspace::{GrassmannAccumulator, Subspace};

/// How activations and gradients cross layer boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    /// Subspace coefficients; requires a constrained model.
    Compressed,
    /// Dense `f32` tensors.
    Uncompressed,
    /// A lossy baseline at the given compression ratio.
    Lossy { codec: LossyCodec, ratio: f64 },
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Compressed => f.write_str("compressed"),
            Self::Uncompressed => f.write_str("uncompressed"),
            Self::Lossy { codec, ratio } => write!(f, "lossy:{codec}:{ratio}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compressed" => return Ok(Self::Compressed),
            "uncompressed" => return Ok(Self::Uncompressed),
            _ => {}
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["lossy", codec, ratio] => {
                let ratio: f64 = ratio.parse().map_err(|_| {
                    Error::config("mode", format!("bad compression ratio {ratio:?}"))
                })?;
                if !(ratio >= 1.0 && ratio.is_finite()) {
                    return Err(Error::config(
                        "mode",
                        format!("compression ratio {ratio} must be at least 1"),
                    ));
                }
                Ok(Self::Lossy {
                    codec: codec.parse()?,
                    ratio,
                })
            }
            _ => Err(Error::config(
                "mode",
                format!("expected compressed, uncompressed or lossy:<codec>:<ratio>, got {s:?}"),
            )),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

/// Splits `layers` blocks into `stages` contiguous, near-equal ranges.
pub fn partition_layers(layers: usize, stages: usize) -> Result<Vec<Range<usize>>> {
    if stages == 0 || stages > layers {
        return Err(Error::config(
            "stages",
            format!("cannot split {layers} layers over {stages} stages"),
        ));
    }
    Ok((0..stages)
        .map(|s| s * layers / stages..(s + 1) * layers / stages)
        .collect())
}

/// A batch of `b` sequences of length `n`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub n: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn new(b: usize, n: usize, tokens: Vec<u32>, targets: Vec<u32>) -> Result<Self> {
        if tokens.len() != b * n || targets.len() != b * n {
            return Err(Error::shape(format!(
                "batch {b}x{n} with {} tokens and {} targets",
                tokens.len(),
                targets.len()
            )));
        }
        Ok(Self {
            b,
            n,
            tokens,
            targets,
        })
    }

    /// Splits into `m` microbatches of `b / m` sequences.
    pub fn split(&self, m: usize) -> Result<Vec<Batch>> {
        if m == 0 || self.b % m != 0 {
            return Err(Error::config(
                "plan.microbatches",
                format!("batch {} is not divisible into {m} microbatches", self.b),
            ));
        }
        let rows = self.b / m * self.n;
        Ok((0..m)
            .map(|i| Batch {
                b: self.b / m,
                n: self.n,
                tokens: self.tokens[i * rows..(i + 1) * rows].to_vec(),
                targets: self.targets[i * rows..(i + 1) * rows].to_vec(),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transport {
    Channels,
    /// One bind address per link, or a single address with port 0 that
    /// every link reuses.
    Tcp(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOptions {
    pub stages: usize,
    pub transport: Transport,
    pub settings: StageSettings,
    /// Modelled compute rate in FLOP/s; zero makes compute free.
    pub compute_flops: f64,
    pub log_frames: bool,
}

/// Per-step knobs beyond the batch itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRequest {
    pub step: u64,
    pub lr: f64,
    pub microbatches: usize,
    pub grassmann_update: bool,
    pub collect_stats: bool,
    pub report_grads: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub tokens: usize,
    /// Bytes of forward frames.
    pub bytes_fwd: usize,
    /// Bytes of backward and subspace frames.
    pub bytes_bwd: usize,
    pub virtual_time: f64,
    pub grassmann_loss: Option<f64>,
    pub boundary_errors: Vec<f64>,
    pub layer_stats: Vec<LayerStats>,
    pub frames: Vec<FrameRecord>,
    pub subspace_version: u32,
    /// Summed microbatch gradients (already divided by the microbatch
    /// count through the loss scaling).
    pub grads: Option<ModelGrads>,
}

impl StepReport {
    /// Tokens per virtual second; infinite when the step took no time.
    pub fn tps(&self) -> f64 {
        if self.virtual_time > 0.0 {
            self.tokens as f64 / self.virtual_time
        } else {
            f64::INFINITY
        }
    }
}

/// Optimizer moments of every trainable tensor plus the pending Grassmann
/// accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// Per layer, in `LAYER_TENSORS` order.
    pub layers: Vec<Vec<MomentState>>,
    pub token_low: Option<MomentState>,
    pub positional: Option<MomentState>,
    pub head: MomentState,
    pub accumulator: Option<GrassmannAccumulator>,
}

impl OptimizerState {
    pub fn empty(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|p| {
                    p.tensors()
                        .iter()
                        .map(|w| MomentState::like(w, false))
                        .collect()
                })
                .collect(),
            token_low: None,
            positional: None,
            head: MomentState::like(&model.head, false),
            accumulator: None,
        }
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub subspace: Subspace,
    pub optimizer: OptimizerState,
}

enum Command {
    Step(Box<StageCommand>),
    Finish,
}

enum Reply {
    Step(Box<Result<StageReport>>),
    Finished(Box<Stage>),
}

struct Worker {
    tx: Sender<Command>,
    rx: Receiver<Reply>,
    handle: Option<JoinHandle<()>>,
}

fn worker_loop(mut stage: Stage, mut links: Links, rx: Receiver<Command>, tx: Sender<Reply>) {
    while let Ok(cmd) = rx.recv() {
        match cmd {
            Command::Step(cmd) => {
                let result = stage.step(&cmd, &mut links);
                let failed = result.is_err();
                if failed {
                    // Hanging up unblocks peers waiting on our frames.
                    links = Links::default();
                }
                if tx.send(Reply::Step(Box::new(result))).is_err() || failed {
                    return;
                }
            }
            Command::Finish => {
                drop(links);
                let _ = tx.send(Reply::Finished(Box::new(stage)));
                return;
            }
        }
    }
}

/// A running pipeline of stage workers.
pub struct Pipeline {
    workers: Vec<Worker>,
    layout: Vec<Range<usize>>,
    template: Model,
    compute_flops: f64,
    logs: Vec<FrameLog>,
    aborted: Option<(usize, String)>,
}

fn build_links(stages: usize, transport: &Transport) -> Result<Vec<Links>> {
    let mut links: Vec<Links> = (0..stages).map(|_| Links::default()).collect();
    let count = stages - 1;
    if let Transport::Tcp(addrs) = transport {
        let shared = addrs.len() == 1 && addrs[0].ends_with(":0");
        if !(addrs.len() == count || shared) && count > 0 {
            return Err(Error::config(
                "tcp",
                format!("{} addresses given for {count} links", addrs.len()),
            ));
        }
    }
    for j in 0..count {
        let (upper, lower): (Box<dyn Endpoint>, Box<dyn Endpoint>) = match transport {
            Transport::Channels => {
                let (a, b) = channel_pair();
                (Box::new(a), Box::new(b))
            }
            Transport::Tcp(addrs) => {
                let addr = addrs.get(j).unwrap_or(&addrs[0]);
                let (a, b) = tcp_pair(addr)?;
                (Box::new(a), Box::new(b))
            }
        };
        links[j].down = Some(upper);
        links[j + 1].up = Some(lower);
    }
    Ok(links)
}

impl Pipeline {
    pub fn launch(model: &Model, subspace: &Subspace, opts: PipelineOptions) -> Result<Self> {
        Self::launch_inner(model, subspace, None, opts)
    }

    /// Launches from a saved state, restoring optimizer moments.
    pub fn resume(state: &TrainState, opts: PipelineOptions) -> Result<Self> {
        Self::launch_inner(&state.model, &state.subspace, Some(&state.optimizer), opts)
    }

    fn launch_inner(
        model: &Model,
        subspace: &Subspace,
        optimizer: Option<&OptimizerState>,
        opts: PipelineOptions,
    ) -> Result<Self> {
        let layout = partition_layers(model.num_layers(), opts.stages)?;
        opts.settings.shaper.validate()?;
        opts.settings.adam.validate()?;
        if matches!(opts.settings.mode, Mode::Compressed) {
            if !model.constrained {
                return Err(Error::config(
                    "mode",
                    "compressed mode needs a constrained model",
                ));
            }
            if opts.settings.train_positional {
                return Err(Error::config(
                    "train_positional",
                    "positional embeddings must stay frozen when boundaries are compressed",
                ));
            }
        }
        let mut links = build_links(opts.stages, &opts.transport)?;
        let logs: Vec<FrameLog> = (0..opts.stages).map(|_| FrameLog::new()).collect();
        if opts.log_frames {
            for (l, log) in links.iter_mut().zip(&logs) {
                l.up =
                    l.up.take()
                        .map(|e| Box::new(Tee::new(e, log.clone())) as Box<dyn Endpoint>);
                l.down = l
                    .down
                    .take()
                    .map(|e| Box::new(Tee::new(e, log.clone())) as Box<dyn Endpoint>);
            }
        }
        let mut workers = Vec::with_capacity(opts.stages);
        for (s, (range, l)) in layout.iter().zip(links).enumerate() {
            let mut stage = Stage::new(
                model,
                subspace,
                s,
                opts.stages,
                range.clone(),
                opts.settings.clone(),
            )?;
            if let Some(opt) = optimizer {
                stage.restore_optimizer(opt)?;
            }
            let (cmd_tx, cmd_rx) = unbounded();
            let (rep_tx, rep_rx) = unbounded();
            let handle = std::thread::Builder::new()
                .name(format!("stage-{s}"))
                .spawn(move || worker_loop(stage, l, cmd_rx, rep_tx))?;
            workers.push(Worker {
                tx: cmd_tx,
                rx: rep_rx,
                handle: Some(handle),
            });
        }
        Ok(Self {
            workers,
            layout,
            template: model.clone(),
            compute_flops: opts.compute_flops,
            logs,
            aborted: None,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.workers.len()
    }

    pub fn layout(&self) -> &[Range<usize>] {
        &self.layout
    }

    fn abort(&mut self, stage: usize, message: String) -> Error {
        self.aborted = Some((stage, message.clone()));
        Error::StageFailure { stage, message }
    }

    /// Runs one training step over `batch`.
    pub fn step(&mut self, batch: &Batch, req: StepRequest) -> Result<StepReport> {
        if let Some((stage, message)) = &self.aborted {
            return Err(Error::StageFailure {
                stage: *stage,
                message: format!("pipeline already aborted: {message}"),
            });
        }
        let micro = batch.split(req.microbatches)?;
        let last = self.workers.len() - 1;
        for (s, w) in self.workers.iter().enumerate() {
            let cmd = StageCommand {
                step: req.step,
                lr: req.lr,
                micro: micro
                    .iter()
                    .map(|mb| MicroBatch {
                        b: mb.b,
                        n: mb.n,
                        tokens: if s == 0 {
                            mb.tokens.clone()
                        } else {
                            Vec::new()
                        },
                        targets: if s == last {
                            mb.targets.clone()
                        } else {
                            Vec::new()
                        },
                    })
                    .collect(),
                grassmann_update: req.grassmann_update,
                collect_stats: req.collect_stats,
                report_grads: req.report_grads,
            };
            if w.tx.send(Command::Step(Box::new(cmd))).is_err() {
                return Err(self.abort(s, "worker is gone".into()));
            }
        }
        let mut reports = Vec::with_capacity(self.workers.len());
        let mut failures: Vec<(usize, Error)> = Vec::new();
        for (s, w) in self.workers.iter().enumerate() {
            match w.rx.recv() {
                Ok(Reply::Step(r)) => match *r {
                    Ok(rep) => reports.push(rep),
                    Err(e) => failures.push((s, e)),
                },
                Ok(Reply::Finished(_)) => {
                    failures.push((s, Error::Protocol("unexpected finish".into())))
                }
                Err(_) => failures.push((s, Error::Disconnected("worker thread exited".into()))),
            }
        }
        if !failures.is_empty() {
            let (s, e) = failures
                .iter()
                .find(|(_, e)| !matches!(e, Error::Disconnected(_)))
                .unwrap_or(&failures[0]);
            let (s, message) = (*s, e.to_string());
            return Err(self.abort(s, message));
        }
        self.assemble(batch, &req, reports)
    }

    fn assemble(
        &mut self,
        batch: &Batch,
        req: &StepRequest,
        reports: Vec<StageReport>,
    ) -> Result<StepReport> {
        let version = reports[0].subspace_version;
        if let Some(r) = reports.iter().find(|r| r.subspace_version != version) {
            return Err(self.abort(
                r.stage,
                format!(
                    "subspace version {} differs from stage 0's {version}",
                    r.subspace_version
                ),
            ));
        }
        let per_stage: Vec<usize> = self.layout.iter().map(|r| r.len()).collect();
        let compute = stage_compute_times(
            &self.template.dims,
            &per_stage,
            batch.b / req.microbatches,
            batch.n,
            self.compute_flops,
        );
        let frames: Vec<FrameRecord> = reports
            .iter()
            .flat_map(|r| r.frames.iter().copied())
            .collect();
        let virtual_time = step_time(self.workers.len(), req.microbatches, &frames, &compute);
        let bytes = |pred: fn(MsgType) -> bool| {
            frames
                .iter()
                .filter(|f| pred(f.kind))
                .map(|f| f.bytes)
                .sum()
        };
        let grads = if req.report_grads {
            let mut g = ModelGrads::zeros(&self.template.dims);
            for r in &reports {
                let sg = r
                    .grads
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("missing gradients".into()))?;
                for (i, lg) in sg.layers.iter().enumerate() {
                    g.layers[sg.first_layer + i] = lg.clone();
                }
                if let Some(t) = &sg.token_low {
                    g.token_low = t.clone();
                }
                if let Some(p) = &sg.positional {
                    g.positional = p.clone();
                }
                if let Some(h) = &sg.head {
                    g.head = h.clone();
                }
            }
            Some(g)
        } else {
            None
        };
        let last = reports.last().expect("at least one stage");
        Ok(StepReport {
            step: req.step,
            loss: last.loss.unwrap_or(f64::NAN),
            tokens: batch.b * batch.n,
            bytes_fwd: bytes(|k| k == MsgType::Forward),
            bytes_bwd: bytes(|k| matches!(k, MsgType::Backward | MsgType::Subspace)),
            virtual_time,
            grassmann_loss: last.grassmann_loss,
            boundary_errors: reports
                .iter()
                .flat_map(|r| r.boundary_errors.iter().copied())
                .collect(),
            layer_stats: reports
                .iter()
                .flat_map(|r| r.layer_stats.iter().copied())
                .collect(),
            frames,
            subspace_version: version,
            grads,
        })
    }

    /// Frames sent since the last call, grouped by sending stage.
    pub fn drain_frame_log(&self) -> Vec<u8> {
        self.logs.iter().flat_map(|l| l.drain()).collect()
    }

    /// Stops the workers and reassembles the trained model and the current
    /// subspace.
    pub fn finish(self) -> Result<(Model, Subspace)> {
        let state = self.finish_state(0)?;
        Ok((state.model, state.subspace))
    }

    /// Like [`Pipeline::finish`], also collecting optimizer state. `step`
    /// is recorded as the number of completed steps.
    pub fn finish_state(mut self, step: u64) -> Result<TrainState> {
        if let Some((stage, message)) = self.aborted.clone() {
            return Err(Error::StageFailure { stage, message });
        }
        let mut model = self.template.clone();
        let mut optimizer = OptimizerState::empty(&model);
        let mut subspace = None;
        for (s, w) in self.workers.iter_mut().enumerate() {
            w.tx.send(Command::Finish)
                .map_err(|_| Error::StageFailure {
                    stage: s,
                    message: "worker is gone".into(),
                })?;
            match w.rx.recv() {
                Ok(Reply::Finished(stage)) => {
                    stage.write_into(&mut model);
                    stage.export_optimizer(&mut optimizer);
                    subspace.get_or_insert_with(|| stage.subspace().clone());
                }
                _ => {
                    return Err(Error::StageFailure {
                        stage: s,
                        message: "worker did not return its state".into(),
                    })
                }
            }
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
        Ok(TrainState {
            step,
            model,
            subspace: subspace.expect("at least one stage"),
            optimizer,
        })
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        for w in &self.workers {
            let _ = w.tx.send(Command::Finish);
        }
        for w in &mut self.workers {
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
    }
}
