//! Command-line front end: builds a [`RunConfig`] from a JSON file plus flag
//! overrides and dispatches to the experiment drivers.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use subpipe_core::experiments::{
    compare_codecs, error_accumulation, rank_diagnostic, train, Injection,
};
use subpipe_core::{LossyCodec, Mode, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "subpipe",
    version,
    about = "Subspace-compressed pipeline training at desk scale"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// compressed, uncompressed or lossy:<codec>:<ratio>.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub stages: Option<usize>,
    /// Link addresses, one per stage boundary or a single host:0.
    #[arg(long, global = true, value_delimiter = ',')]
    pub tcp: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sleep for shaped delays instead of only advancing the virtual clock.
    #[arg(long, global = true)]
    pub realtime: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics.csv and summary.txt.
    Train {
        /// Also write frames.bin.
        #[arg(long)]
        log_frames: bool,
        /// Also write checkpoint.bin.
        #[arg(long)]
        checkpoint: bool,
    },
    /// Boundary reconstruction error of every codec at a matched budget.
    CompareCodecs {
        /// Also train with each codec and record losses.
        #[arg(long)]
        convergence: bool,
    },
    /// Stable ranks of the projection matrices during unconstrained training.
    RankDiag,
    /// Backward error accumulation against its bound.
    ErrorAccum {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// noise:<relative>, <codec> or <codec>:<ratio>; the ratio
        /// defaults to d / k.
        #[arg(long, default_value = "topk")]
        injection: String,
    },
}

/// Loads the configuration file if any, applies flag overrides and
/// validates the result.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            RunConfig::read(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(stages) = args.stages {
        cfg.stages = stages;
    }
    if let Some(tcp) = &args.tcp {
        cfg.tcp = tcp.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.realtime {
        cfg.realtime = true;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(steps) = args.steps {
        cfg.plan.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_injection(spec: &str, cfg: &RunConfig) -> Result<Injection> {
    let default_ratio = cfg.dims.d as f64 / cfg.dims.k as f64;
    let (name, arg) = match spec.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (spec, None),
    };
    let number = |a: Option<&str>, fallback: Option<f64>| -> Result<f64> {
        match a {
            Some(a) => a
                .parse()
                .with_context(|| format!("bad number {a:?} in injection {spec:?}")),
            None => fallback.with_context(|| format!("injection {spec:?} needs a value")),
        }
    };
    if name == "noise" {
        let relative = number(arg, None)?;
        if !(relative >= 0.0 && relative.is_finite()) {
            bail!("noise level must be a non-negative number, got {relative}");
        }
        return Ok(Injection::Noise { relative });
    }
    let codec: LossyCodec = name.parse()?;
    Ok(Injection::Codec {
        codec,
        ratio: number(arg, Some(default_ratio))?,
    })
}

/// Runs the command and returns the summary line it wrote.
pub fn run(cli: &Cli) -> Result<String> {
    let mut cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Train {
            log_frames,
            checkpoint,
        } => {
            cfg.log_frames |= *log_frames;
            cfg.save_checkpoint |= *checkpoint;
            train(&cfg)?;
        }
        Command::CompareCodecs { convergence } => {
            compare_codecs(&cfg, *convergence)?;
        }
        Command::RankDiag => {
            rank_diagnostic(&cfg)?;
        }
        Command::ErrorAccum { trials, injection } => {
            let injection = parse_injection(injection, &cfg)?;
            error_accumulation(&cfg, injection, *trials)?;
        }
    }
    let path = cfg.out_dir.join("summary.txt");
    let summary =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(summary.trim_end().to_string())
}
