//! Byte-level corpus handling: every byte is a token.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};
use crate::pipeline::Batch;

/// Reads a file as a token stream of byte values.
pub fn ingest_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::config(
            "corpus",
            format!("{} is empty", path.display()),
        ));
    }
    Ok(tokenize(&bytes))
}

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Deterministic English-like text of exactly `len` bytes: Zipf-distributed
/// words built from syllables, grouped into sentences and paragraphs.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    const ONSETS: [&str; 20] = [
        "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr",
        "ch", "sh", "th",
    ];
    const NUCLEI: [&str; 8] = ["a", "e", "i", "o", "u", "ea", "ou", "ai"];
    const CODAS: [&str; 8] = ["", "", "n", "r", "s", "t", "nd", "ng"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..2000)
        .map(|_| {
            let syllables = rng.random_range(1..=3);
            (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS[rng.random_range(0..ONSETS.len())],
                        NUCLEI[rng.random_range(0..NUCLEI.len())],
                        CODAS[rng.random_range(0..CODAS.len())]
                    )
                })
                .collect()
        })
        .collect();
    let zipf = Zipf::new(lexicon.len() as f64, 1.1).expect("valid Zipf parameters");
    let mut out = String::with_capacity(len + 64);
    let mut sentence_start = true;
    while out.len() < len {
        let word = &lexicon[zipf.sample(&mut rng) as usize - 1];
        if sentence_start {
            let mut chars = word.chars();
            if let Some(c) = chars.next() {
                out.push(c.to_ascii_uppercase());
                out.push_str(chars.as_str());
            }
            sentence_start = false;
        } else {
            out.push_str(word);
        }
        match rng.random_range(0..100) {
            0..=6 => {
                out.push_str(". ");
                sentence_start = true;
            }
            7 => {
                out.push_str(".\n\n");
                sentence_start = true;
            }
            8..=12 => out.push_str(", "),
            _ => out.push(' '),
        }
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(len);
    bytes
}

/// Non-overlapping windows of `n + 1` tokens served in a seeded random
/// order. When an epoch runs out the order is reshuffled and sampling
/// wraps around.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    tokens: Vec<u32>,
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl WindowSampler {
    pub fn new(tokens: Vec<u32>, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config(
                "plan.seq",
                "sequence length must be positive",
            ));
        }
        let windows = tokens.len() / (n + 1);
        if windows == 0 {
            return Err(Error::config(
                "corpus",
                format!(
                    "{} tokens cannot fill one window of {}",
                    tokens.len(),
                    n + 1
                ),
            ));
        }
        let mut s = Self {
            tokens,
            n,
            order: (0..windows).collect(),
            cursor: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn window_count(&self) -> usize {
        self.order.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn next_window(&mut self) -> &[u32] {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let start = self.order[self.cursor] * (self.n + 1);
        self.cursor += 1;
        &self.tokens[start..start + self.n + 1]
    }

    /// Next `b` windows as inputs and shifted targets.
    pub fn next_batch(&mut self, b: usize) -> Batch {
        let n = self.n;
        let mut tokens = Vec::with_capacity(b * n);
        let mut targets = Vec::with_capacity(b * n);
        for _ in 0..b {
            let w = self.next_window();
            tokens.extend_from_slice(&w[..n]);
            targets.extend_from_slice(&w[1..]);
        }
        Batch {
            b,
            n,
            tokens,
            targets,
        }
    }
}
