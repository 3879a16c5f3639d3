use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::optim::AdamConfig;
use crate::pipeline::{partition_layers, Mode, ShaperConfig, Transport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub steps: u64,
    /// Microbatches per step.
    pub microbatches: usize,
    /// Sequences per step, split evenly across microbatches.
    pub batch: usize,
    pub seq: usize,
    /// Steps between subspace updates.
    pub grassmann_period: u64,
    pub grassmann_eta: f64,
    /// Steps between stable-rank and off-subspace measurements.
    pub stats_every: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            microbatches: 2,
            batch: 16,
            seq: 32,
            grassmann_period: 500,
            grassmann_eta: 0.1,
            stats_every: 1,
        }
    }
}

/// Everything a run needs. Loaded from JSON with snake_case keys; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dims: ModelDims,
    pub optim: AdamConfig,
    pub plan: PlanConfig,
    pub shaper: ShaperConfig,
    pub mode: Mode,
    pub stages: usize,
    /// Link bind addresses; empty means in-process channels.
    pub tcp: Vec<String>,
    pub seed: u64,
    /// Text file to train on; a synthetic corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_corpus_bytes: usize,
    pub out_dir: PathBuf,
    /// Modelled FLOP/s per stage; zero makes compute free on the virtual
    /// clock.
    pub compute_flops: f64,
    pub train_positional: bool,
    pub realtime: bool,
    pub log_frames: bool,
    pub save_checkpoint: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims::default(),
            optim: AdamConfig::default(),
            plan: PlanConfig::default(),
            shaper: ShaperConfig::default(),
            mode: Mode::Compressed,
            stages: 4,
            tcp: Vec::new(),
            seed: 0,
            corpus: None,
            synthetic_corpus_bytes: 1 << 20,
            out_dir: PathBuf::from("out"),
            compute_flops: 0.0,
            train_positional: false,
            realtime: false,
            log_frames: false,
            save_checkpoint: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file without validating it, for callers that
    /// override fields first.
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn transport(&self) -> Transport {
        if self.tcp.is_empty() {
            Transport::Channels
        } else {
            Transport::Tcp(self.tcp.clone())
        }
    }

    /// Whether the model is built with subspace constraints.
    pub fn constrained(&self) -> bool {
        matches!(self.mode, Mode::Compressed)
    }

    /// Checks every field and every cross-field constraint.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.optim.validate()?;
        self.shaper.validate()?;
        let p = &self.plan;
        if p.steps == 0 {
            return Err(Error::config("plan.steps", "must be at least 1"));
        }
        if p.microbatches == 0 {
            return Err(Error::config("plan.microbatches", "must be at least 1"));
        }
        if p.batch == 0 || p.batch % p.microbatches != 0 {
            return Err(Error::config(
                "plan.batch",
                format!(
                    "{} is not a positive multiple of {} microbatches",
                    p.batch, p.microbatches
                ),
            ));
        }
        if p.seq == 0 || p.seq > self.dims.n_max {
            return Err(Error::config(
                "plan.seq",
                format!("{} outside [1, dims.n_max = {}]", p.seq, self.dims.n_max),
            ));
        }
        if p.grassmann_period == 0 {
            return Err(Error::config("plan.grassmann_period", "must be at least 1"));
        }
        if !(p.grassmann_eta > 0.0 && p.grassmann_eta.is_finite()) {
            return Err(Error::config(
                "plan.grassmann_eta",
                "must be positive and finite",
            ));
        }
        if p.stats_every == 0 {
            return Err(Error::config("plan.stats_every", "must be at least 1"));
        }
        partition_layers(self.dims.layers, self.stages)?;
        let links = self.stages - 1;
        if !self.tcp.is_empty()
            && self.tcp.len() != links
            && !(self.tcp.len() == 1 && self.tcp[0].ends_with(":0"))
        {
            return Err(Error::config(
                "tcp",
                format!("{} addresses given for {links} links", self.tcp.len()),
            ));
        }
        if self.train_positional && self.constrained() {
            return Err(Error::config(
                "train_positional",
                "positional embeddings must stay frozen when boundaries are compressed",
            ));
        }
        if self.corpus.is_none() && self.synthetic_corpus_bytes < (p.seq + 1) * p.batch {
            return Err(Error::config(
                "synthetic_corpus_bytes",
                format!(
                    "{} bytes cannot fill one batch",
                    self.synthetic_corpus_bytes
                ),
            ));
        }
        if !(self.compute_flops >= 0.0 && self.compute_flops.is_finite()) {
            return Err(Error::config(
                "compute_flops",
                "must be non-negative and finite",
            ));
        }
        Ok(())
    }
}
