use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Link model: every frame sees a bandwidth drawn from `N(B, (jitter B)^2)`,
/// clamped below at `floor B`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShaperConfig {
    /// Mean bandwidth `B` in bits per second.
    pub bandwidth_bps: f64,
    pub jitter: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for ShaperConfig {
    fn default() -> Self {
        Self {
            bandwidth_bps: 80e6,
            jitter: 0.2,
            floor: 0.1,
            seed: 0,
        }
    }
}

impl ShaperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(Error::config(
                "shaper.bandwidth_bps",
                "must be positive and finite",
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("shaper.jitter", "must be non-negative"));
        }
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(Error::config("shaper.floor", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Samples one bandwidth in bits per second.
pub fn sample_bandwidth<R: Rng + ?Sized>(cfg: &ShaperConfig, rng: &mut R) -> f64 {
    let b = cfg.bandwidth_bps;
    let raw = if cfg.jitter > 0.0 {
        Normal::new(b, cfg.jitter * b)
            .expect("positive std")
            .sample(rng)
    } else {
        b
    };
    raw.max(cfg.floor * b)
}

/// Virtual transfer time in seconds for `bytes` over one sampled bandwidth.
pub fn shape_delay<R: Rng + ?Sized>(bytes: usize, cfg: &ShaperConfig, rng: &mut R) -> f64 {
    let bw = sample_bandwidth(cfg, rng);
    if bytes == 0 {
        return 0.0;
    }
    8.0 * bytes as f64 / bw
}

/// Which way a frame travels over a link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Down,
    Up,
}

/// Seeded delay source for one direction of one link. Each direction gets an
/// independent stream so the sampled delays depend only on the order of
/// frames on that link.
#[derive(Clone, Debug)]
pub struct Shaper {
    cfg: ShaperConfig,
    rng: ChaCha8Rng,
}

impl Shaper {
    pub fn new(cfg: ShaperConfig, link: usize, dir: Direction) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2 * link as u64 + matches!(dir, Direction::Up) as u64);
        Self { cfg, rng }
    }

    pub fn delay(&mut self, bytes: usize) -> f64 {
        shape_delay(bytes, &self.cfg, &mut self.rng)
    }
}
