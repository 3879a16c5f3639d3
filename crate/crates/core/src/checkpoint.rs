//! Versioned little-endian checkpoint blob.
//!
//! Layout: magic `SPCK`, format version `u32`, completed steps `u64`, the
//! seven model dimensions as `u64`, a constrained flag byte, the subspace
//! (version `u32` + matrix), every model tensor, then the optimizer state.
//! A matrix is `rows u64`, `cols u64` and `rows * cols` `f32` values; a
//! moment state is `t u64`, a row-constant flag byte and its two matrices;
//! optional items are prefixed by a presence byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{EmbeddingTables, LayerParams, Model, ModelDims};
use crate::optim::MomentState;
use crate::pipeline::{OptimizerState, TrainState};
use crate::subspace::{GrassmannAccumulator, Subspace};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for v in m.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn moments(&mut self, st: &MomentState) {
        self.u64(st.t);
        self.u8(st.row_constant as u8);
        self.matrix(&st.m);
        self.matrix(&st.v);
    }

    fn optional<T>(&mut self, v: Option<&T>, f: impl FnOnce(&mut Self, &T)) {
        self.u8(v.is_some() as u8);
        if let Some(v) = v {
            f(self, v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Protocol(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Protocol(format!("bad flag byte {other}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::Protocol("size does not fit in memory".into()))
    }

    fn matrix(&mut self, shape: (usize, usize)) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        if (rows, cols) != shape {
            return Err(Error::Protocol(format!(
                "checkpoint matrix is {rows}x{cols}, expected {}x{}",
                shape.0, shape.1
            )));
        }
        let raw = self.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn moments(&mut self, shape: (usize, usize)) -> Result<MomentState> {
        let t = self.u64()?;
        let row_constant = self.flag()?;
        let m = self.matrix(shape)?;
        let v = self.matrix(shape)?;
        Ok(MomentState {
            m,
            v,
            t,
            row_constant,
        })
    }
}

/// Serializes a training state.
pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(state.step);
    let m = &state.model;
    let d = &m.dims;
    for v in [d.d, d.d_ff, d.heads, d.layers, d.vocab, d.n_max, d.k] {
        w.u64(v as u64);
    }
    w.u8(m.constrained as u8);
    w.u32(state.subspace.version());
    w.matrix(state.subspace.basis());
    for p in &m.layers {
        for t in p.tensors() {
            w.matrix(t);
        }
    }
    w.matrix(&m.embeddings.positional);
    w.matrix(&m.embeddings.token_fixed);
    w.matrix(&m.embeddings.token_low);
    w.matrix(&m.head);
    let o = &state.optimizer;
    for layer in &o.layers {
        for st in layer {
            w.moments(st);
        }
    }
    w.optional(o.token_low.as_ref(), |w, st| w.moments(st));
    w.optional(o.positional.as_ref(), |w, st| w.moments(st));
    w.moments(&o.head);
    w.optional(o.accumulator.as_ref(), |w, acc| {
        w.u64(acc.sample_count() as u64);
        w.matrix(acc.mean());
    });
    w.0
}

/// Parses a blob written by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Protocol("not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Protocol(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let step = r.u64()?;
    let mut v = [0usize; 7];
    for x in &mut v {
        *x = r.usize()?;
    }
    let dims = ModelDims {
        d: v[0],
        d_ff: v[1],
        heads: v[2],
        layers: v[3],
        vocab: v[4],
        n_max: v[5],
        k: v[6],
    };
    dims.validate()?;
    let constrained = r.flag()?;
    let sub_version = r.u32()?;
    let subspace = Subspace::from_basis(r.matrix((dims.d, dims.k))?, sub_version)?;
    let (dd, ff) = (dims.d, dims.d_ff);
    let shapes = [(dd, dd), (dd, dd), (dd, dd), (dd, dd), (dd, ff), (ff, dd)];
    let mut layers = Vec::with_capacity(dims.layers);
    for _ in 0..dims.layers {
        let mut p = LayerParams::zeros(dd, ff, dims.heads);
        for (t, &shape) in p.tensors_mut().into_iter().zip(&shapes) {
            *t = r.matrix(shape)?;
        }
        layers.push(p);
    }
    let embeddings = EmbeddingTables {
        positional: r.matrix((dims.n_max, dd))?,
        token_fixed: r.matrix((dims.vocab, dd))?,
        token_low: r.matrix((dims.vocab, dd))?,
    };
    let head = r.matrix((dd, dims.vocab))?;
    let mut opt_layers = Vec::with_capacity(dims.layers);
    for _ in 0..dims.layers {
        opt_layers.push(
            shapes
                .iter()
                .map(|&s| r.moments(s))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let token_low = if r.flag()? {
        Some(r.moments((dims.vocab, dd))?)
    } else {
        None
    };
    let positional = if r.flag()? {
        Some(r.moments((dims.n_max, dd))?)
    } else {
        None
    };
    let head_moments = r.moments((dd, dims.vocab))?;
    let accumulator = if r.flag()? {
        let count = r.usize()?;
        Some(GrassmannAccumulator::from_parts(
            r.matrix((dd, dd))?,
            count,
        )?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Protocol(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(TrainState {
        step,
        model: Model {
            dims,
            layers,
            embeddings,
            head,
            constrained,
        },
        subspace,
        optimizer: OptimizerState {
            layers: opt_layers,
            token_low,
            positional,
            head: head_moments,
            accumulator,
        },
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    Ok(std::fs::write(path, to_bytes(state))?)
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_bytes(&std::fs::read(path)?)
}
