use std::ops::Range;
use std::time::Duration;

use crate::codec::{
    decode_backward, decode_dense, decode_forward, decode_subspace, encode_backward, encode_dense,
    encode_forward, encode_subspace, relative_mse, CompressedFrame, MsgType, HEADER_BYTES,
};
use crate::error::{Error, Result};
use crate::linalg::{stable_rank, Matrix, Tensor3};
use crate::model::{
    backward_block, forward_block, lm_loss, ActivationStash, EmbeddingTables, LayerParams, Model,
};
use crate::optim::{adamw_step, rotate_col_moments, rotate_row_moments, AdamConfig, MomentState};
use crate::subspace::{GrassmannAccumulator, Subspace};

use super::shaper::{Direction, Shaper, ShaperConfig};
use super::transport::{Endpoint, Links};
use super::{Mode, OptimizerState};

/// Run-wide settings every stage shares.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSettings {
    pub mode: Mode,
    pub adam: AdamConfig,
    pub grassmann_eta: f64,
    pub shaper: ShaperConfig,
    pub realtime: bool,
    pub train_positional: bool,
}

/// One microbatch as seen by a stage. Only stage 0 receives `tokens` and
/// only the last stage receives `targets`; other stages get empty vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MicroBatch {
    pub b: usize,
    pub n: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageCommand {
    pub step: u64,
    pub lr: f64,
    pub micro: Vec<MicroBatch>,
    pub grassmann_update: bool,
    pub collect_stats: bool,
    pub report_grads: bool,
}

/// A frame this stage put on a link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRecord {
    pub kind: MsgType,
    /// Link `j` joins stages `j` and `j + 1`.
    pub link: usize,
    pub microbatch: usize,
    pub bytes: usize,
    /// Virtual transfer time in seconds.
    pub delay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub stable_rank_p1: f64,
    pub stable_rank_p2: f64,
    pub offsub_p1: f64,
    pub offsub_p2: f64,
}

/// Summed microbatch gradients of the tensors a stage owns.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGrads {
    pub first_layer: usize,
    pub layers: Vec<LayerParams>,
    pub token_low: Option<Matrix>,
    pub positional: Option<Matrix>,
    pub head: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    /// Mean microbatch loss; only the last stage reports one.
    pub loss: Option<f64>,
    pub frames: Vec<FrameRecord>,
    /// `sum_mb ||G (I - U U^T)||_F^2` at the final layer's input.
    pub grassmann_loss: Option<f64>,
    /// Relative squared reconstruction error of every forward boundary
    /// this stage produced.
    pub boundary_errors: Vec<f64>,
    pub layer_stats: Vec<LayerStats>,
    pub grads: Option<StageGrads>,
    pub subspace_version: u32,
}

/// Layers `range` of a model plus whatever embedding, head, optimizer and
/// subspace state the stage needs.
pub struct Stage {
    id: usize,
    range: Range<usize>,
    total_layers: usize,
    constrained: bool,
    settings: StageSettings,
    layers: Vec<LayerParams>,
    layer_moments: Vec<Vec<MomentState>>,
    embeddings: EmbeddingTables,
    token_moments: Option<MomentState>,
    pos_moments: Option<MomentState>,
    head: Option<Matrix>,
    head_moments: Option<MomentState>,
    subspace: Subspace,
    accumulator: Option<GrassmannAccumulator>,
    shaper_down: Shaper,
    shaper_up: Option<Shaper>,
    stash: ActivationStash,
}

fn zero_like(p: &LayerParams) -> LayerParams {
    LayerParams::zeros(p.d(), p.d_ff(), p.heads)
}

impl Stage {
    pub fn new(
        model: &Model,
        subspace: &Subspace,
        id: usize,
        num_stages: usize,
        range: Range<usize>,
        settings: StageSettings,
    ) -> Result<Self> {
        let total_layers = model.num_layers();
        if range.is_empty() || range.end > total_layers || id >= num_stages {
            return Err(Error::config(
                "stages",
                format!("stage {id} cannot own layers {range:?}"),
            ));
        }
        let is_last = id + 1 == num_stages;
        if is_last != (range.end == total_layers) {
            return Err(Error::config(
                "stages",
                "the last stage must own the final layer",
            ));
        }
        let row_constant =
            settings.adam.row_constant_wp2 && matches!(settings.mode, Mode::Compressed);
        let layers: Vec<LayerParams> = model.layers[range.clone()].to_vec();
        let layer_moments = range
            .clone()
            .zip(&layers)
            .map(|(l, p)| {
                let constrained = model.layer_constrained(l);
                p.tensors()
                    .iter()
                    .enumerate()
                    .map(|(t, w)| MomentState::like(w, constrained && row_constant && t == 5))
                    .collect()
            })
            .collect();
        let first = id == 0;
        let accumulator = (is_last && model.constrained && total_layers >= 2)
            .then(|| GrassmannAccumulator::new(subspace.d()));
        Ok(Self {
            id,
            range,
            total_layers,
            constrained: model.constrained,
            layers,
            layer_moments,
            embeddings: model.embeddings.clone(),
            token_moments: first.then(|| MomentState::like(&model.embeddings.token_low, false)),
            pos_moments: (first && settings.train_positional)
                .then(|| MomentState::like(&model.embeddings.positional, false)),
            head: is_last.then(|| model.head.clone()),
            head_moments: is_last.then(|| MomentState::like(&model.head, false)),
            subspace: subspace.clone(),
            accumulator,
            shaper_down: Shaper::new(settings.shaper, id, Direction::Down),
            shaper_up: (id > 0).then(|| Shaper::new(settings.shaper, id - 1, Direction::Up)),
            settings,
            stash: ActivationStash::default(),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn subspace(&self) -> &Subspace {
        &self.subspace
    }

    fn layer_constrained(&self, l: usize) -> bool {
        self.constrained && l + 1 < self.total_layers
    }

    /// Copies this stage's slice of the optimizer state into `opt`.
    pub fn export_optimizer(&self, opt: &mut OptimizerState) {
        for (l, m) in self.range.clone().zip(&self.layer_moments) {
            opt.layers[l] = m.clone();
        }
        if self.id == 0 {
            opt.token_low = self.token_moments.clone();
            opt.positional = self.pos_moments.clone();
        }
        if let Some(h) = &self.head_moments {
            opt.head = h.clone();
        }
        if self.accumulator.is_some() {
            opt.accumulator = self.accumulator.clone();
        }
    }

    /// Loads this stage's slice of a saved optimizer state.
    pub fn restore_optimizer(&mut self, opt: &OptimizerState) -> Result<()> {
        if opt.layers.len() != self.total_layers || opt.layers.iter().any(|m| m.len() != 6) {
            return Err(Error::shape("optimizer state does not match the model"));
        }
        for (i, l) in self.range.clone().enumerate() {
            for (mine, saved) in self.layer_moments[i].iter_mut().zip(&opt.layers[l]) {
                if mine.m.shape() != saved.m.shape() {
                    return Err(Error::shape(format!(
                        "optimizer state of layer {l} has the wrong shape"
                    )));
                }
                *mine = saved.clone();
            }
        }
        if self.id == 0 {
            if let (Some(mine), Some(saved)) = (self.token_moments.as_mut(), opt.token_low.as_ref())
            {
                *mine = saved.clone();
            }
            if let (Some(mine), Some(saved)) = (self.pos_moments.as_mut(), opt.positional.as_ref())
            {
                *mine = saved.clone();
            }
        }
        if let Some(mine) = self.head_moments.as_mut() {
            if mine.m.shape() != opt.head.m.shape() {
                return Err(Error::shape("head optimizer state has the wrong shape"));
            }
            *mine = opt.head.clone();
        }
        if let (Some(mine), Some(saved)) = (self.accumulator.as_mut(), opt.accumulator.as_ref()) {
            if mine.dim() != saved.dim() {
                return Err(Error::shape("accumulator has the wrong dimension"));
            }
            *mine = saved.clone();
        }
        Ok(())
    }

    /// Writes this stage's tensors back into `model`.
    pub fn write_into(&self, model: &mut Model) {
        for (l, p) in self.range.clone().zip(&self.layers) {
            model.layers[l] = p.clone();
        }
        if self.id == 0 {
            model.embeddings = self.embeddings.clone();
        }
        if let Some(h) = &self.head {
            model.head = h.clone();
        }
    }

    fn send(
        &mut self,
        links: &mut Links,
        dir: Direction,
        frame: &CompressedFrame,
        charged: usize,
        microbatch: usize,
    ) -> Result<FrameRecord> {
        let missing = || Error::Protocol(format!("stage {} has no {dir:?} link", self.id));
        let (endpoint, shaper, link) = match dir {
            Direction::Down => (links.down.as_mut(), Some(&mut self.shaper_down), self.id),
            Direction::Up => (
                links.up.as_mut(),
                self.shaper_up.as_mut(),
                self.id.wrapping_sub(1),
            ),
        };
        let endpoint: &mut Box<dyn Endpoint> = endpoint.ok_or_else(missing)?;
        let shaper = shaper.ok_or_else(missing)?;
        let delay = shaper.delay(charged);
        if self.settings.realtime && delay > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(delay));
        }
        endpoint.send(frame)?;
        Ok(FrameRecord {
            kind: frame.msg_type,
            link,
            microbatch,
            bytes: charged,
            delay,
        })
    }

    fn recv(
        &self,
        links: &mut Links,
        dir: Direction,
        want: MsgType,
        microbatch: Option<usize>,
    ) -> Result<CompressedFrame> {
        let endpoint = match dir {
            Direction::Down => links.down.as_mut(),
            Direction::Up => links.up.as_mut(),
        }
        .ok_or_else(|| Error::Protocol(format!("stage {} has no {dir:?} link", self.id)))?;
        let frame = endpoint.recv()?;
        if frame.msg_type != want {
            return Err(Error::Protocol(format!(
                "stage {} expected {want:?}, received {:?}",
                self.id, frame.msg_type
            )));
        }
        if let Some(mb) = microbatch {
            if frame.microbatch_id as usize != mb {
                return Err(Error::Protocol(format!(
                    "stage {} expected microbatch {mb}, received {}",
                    self.id, frame.microbatch_id
                )));
            }
        }
        Ok(frame)
    }

    /// Applies the boundary codec to the output of layer `l`. Returns the
    /// tensor the next layer sees, the frame and its charged size, and the
    /// relative reconstruction error.
    fn boundary_forward(
        &self,
        x: Tensor3,
        tokens: &[u32],
        l: usize,
        mb: usize,
    ) -> Result<(Tensor3, CompressedFrame, usize, f64)> {
        match self.settings.mode {
            Mode::Compressed => {
                let frame = encode_forward(&x, tokens, l, mb, &self.embeddings, &self.subspace)?;
                let recon = decode_forward(&frame, &self.embeddings, &self.subspace)?;
                let err = relative_mse(&recon, &x).unwrap_or(0.0);
                let charged = frame.wire_len();
                Ok((recon, frame, charged, err))
            }
            Mode::Uncompressed => {
                let frame = encode_dense(MsgType::Forward, &x, l, mb)?;
                let charged = frame.wire_len();
                Ok((x, frame, charged, 0.0))
            }
            Mode::Lossy { codec, ratio } => {
                let (approx, wire) = codec.apply_at_ratio(&x, ratio)?;
                let err = relative_mse(&approx, &x).unwrap_or(0.0);
                let frame = encode_dense(MsgType::Forward, &approx, l, mb)?;
                Ok((approx, frame, HEADER_BYTES + wire, err))
            }
        }
    }

    fn decode_incoming_forward(&self, frame: &CompressedFrame) -> Result<Tensor3> {
        match self.settings.mode {
            Mode::Compressed => decode_forward(frame, &self.embeddings, &self.subspace),
            _ => decode_dense(frame, MsgType::Forward),
        }
    }

    /// Applies the boundary codec to the gradient at the input of layer
    /// `l + 1`.
    fn boundary_backward(
        &self,
        g: Tensor3,
        l: usize,
        mb: usize,
    ) -> Result<(Tensor3, CompressedFrame, usize)> {
        match self.settings.mode {
            Mode::Compressed => {
                let frame = encode_backward(&g, l, mb, &self.subspace)?;
                let recon = decode_backward(&frame, &self.subspace)?;
                let charged = frame.wire_len();
                Ok((recon, frame, charged))
            }
            Mode::Uncompressed => {
                let frame = encode_dense(MsgType::Backward, &g, l, mb)?;
                let charged = frame.wire_len();
                Ok((g, frame, charged))
            }
            Mode::Lossy { codec, ratio } => {
                let (approx, wire) = codec.apply_at_ratio(&g, ratio)?;
                let frame = encode_dense(MsgType::Backward, &approx, l, mb)?;
                Ok((approx, frame, HEADER_BYTES + wire))
            }
        }
    }

    fn decode_incoming_backward(&self, frame: &CompressedFrame) -> Result<Tensor3> {
        match self.settings.mode {
            Mode::Compressed => decode_backward(frame, &self.subspace),
            _ => decode_dense(frame, MsgType::Backward),
        }
    }

    /// Runs one GPipe step: all microbatch forwards, all backwards, one
    /// optimizer update, then an optional subspace update and broadcast.
    pub fn step(&mut self, cmd: &StageCommand, links: &mut Links) -> Result<StageReport> {
        let m = cmd.micro.len();
        if m == 0 {
            return Err(Error::config(
                "plan.microbatches",
                "a step needs at least one microbatch",
            ));
        }
        self.stash.clear();
        let inv_m = 1.0 / m as f32;
        let mut frames = Vec::new();
        let mut boundary_errors = Vec::new();
        let mut mb_tokens: Vec<Vec<u32>> = Vec::with_capacity(m);
        let mut finals: Vec<(Tensor3, Tensor3)> = Vec::new();
        let mut loss_sum = 0.0f64;

        for (mb, micro) in cmd.micro.iter().enumerate() {
            let (mut x, tokens) = if self.id == 0 {
                (
                    self.embeddings.embed(&micro.tokens, micro.b, micro.n)?,
                    micro.tokens.clone(),
                )
            } else {
                let frame = self.recv(links, Direction::Up, MsgType::Forward, Some(mb))?;
                (self.decode_incoming_forward(&frame)?, frame.token_ids)
            };
            for (i, l) in self.range.clone().enumerate() {
                let (y, stash) = forward_block(&self.layers[i], l, &x)?;
                self.stash.insert(l, mb, stash);
                x = y;
                if l + 1 < self.total_layers {
                    let (next, frame, charged, err) = self.boundary_forward(x, &tokens, l, mb)?;
                    boundary_errors.push(err);
                    if l + 1 == self.range.end {
                        frames.push(self.send(links, Direction::Down, &frame, charged, mb)?);
                    }
                    x = next;
                }
            }
            if let Some(head) = &self.head {
                let logits = x.matmul(head)?;
                let (loss, dlogits) = lm_loss(&logits, &micro.targets)?;
                if !loss.is_finite() {
                    return Err(Error::NumericFault {
                        layer: self.total_layers,
                    });
                }
                loss_sum += loss as f64;
                finals.push((x, dlogits.scale(inv_m)));
            }
            mb_tokens.push(tokens);
        }

        let mut grads = StageGrads {
            first_layer: self.range.start,
            layers: self.layers.iter().map(zero_like).collect(),
            token_low: (self.id == 0)
                .then(|| Matrix::zeros(self.embeddings.vocab(), self.embeddings.d())),
            positional: (self.id == 0)
                .then(|| Matrix::zeros(self.embeddings.n_max(), self.embeddings.d())),
            head: self
                .head
                .as_ref()
                .map(|h| Matrix::zeros(h.rows(), h.cols())),
        };
        let d = self.subspace.d();
        let mut gram = self
            .accumulator
            .as_ref()
            .map(|_| Matrix::<f32>::zeros(d, d));
        let mut grassmann_loss = self.accumulator.as_ref().map(|_| 0.0f64);

        for mb in 0..m {
            let mut g = if let Some(head) = &self.head {
                let (x, dlogits) = &finals[mb];
                grads
                    .head
                    .as_mut()
                    .expect("last stage")
                    .add_assign(&x.t_matmul(dlogits)?)?;
                dlogits.matmul_t(head)?
            } else {
                let frame = self.recv(links, Direction::Down, MsgType::Backward, Some(mb))?;
                self.decode_incoming_backward(&frame)?
            };
            for (i, l) in self.range.clone().enumerate().rev() {
                let stash = self.stash.take(l, mb)?;
                let (dx, lg) = backward_block(&self.layers[i], &stash, &g)?;
                grads.layers[i].add_assign(&lg)?;
                g = dx;
                if l == 0 {
                    continue;
                }
                if l + 1 == self.total_layers {
                    if let (Some(gram), Some(gl)) = (gram.as_mut(), grassmann_loss.as_mut()) {
                        gram.add_assign(&g.t_matmul(&g)?)?;
                        *gl += self.subspace.grassmann_loss(&g)? as f64;
                    }
                }
                let (next, frame, charged) = self.boundary_backward(g, l - 1, mb)?;
                if l == self.range.start {
                    frames.push(self.send(links, Direction::Up, &frame, charged, mb)?);
                }
                g = next;
            }
            if self.id == 0 {
                let (dt, dp) = self.embeddings.backward(&mb_tokens[mb], &g)?;
                grads.token_low.as_mut().expect("stage 0").add_assign(&dt)?;
                grads
                    .positional
                    .as_mut()
                    .expect("stage 0")
                    .add_assign(&dp)?;
            }
        }
        if !self.stash.is_empty() {
            return Err(Error::Protocol(format!(
                "stage {} left activations stashed",
                self.id
            )));
        }

        self.apply_optimizer(&grads, cmd.lr)?;
        if let (Some(acc), Some(gram)) = (self.accumulator.as_mut(), gram.as_ref()) {
            acc.add_gram(gram)?;
        }
        if cmd.grassmann_update && self.constrained && self.total_layers >= 2 {
            frames.extend(self.update_subspace(links)?);
        }

        let layer_stats = if cmd.collect_stats {
            self.layer_stats()
        } else {
            Vec::new()
        };
        Ok(StageReport {
            stage: self.id,
            loss: self.head.as_ref().map(|_| loss_sum / m as f64),
            frames,
            grassmann_loss,
            boundary_errors,
            layer_stats,
            grads: cmd.report_grads.then_some(grads),
            subspace_version: self.subspace.version(),
        })
    }

    fn apply_optimizer(&mut self, grads: &StageGrads, lr: f64) -> Result<()> {
        let adam = self.settings.adam;
        for ((p, moments), g) in self
            .layers
            .iter_mut()
            .zip(&mut self.layer_moments)
            .zip(&grads.layers)
        {
            for ((w, st), gw) in p
                .tensors_mut()
                .into_iter()
                .zip(moments.iter_mut())
                .zip(g.tensors())
            {
                adamw_step(w, gw, st, &adam, lr)?;
            }
        }
        if let (Some(st), Some(g)) = (self.token_moments.as_mut(), grads.token_low.as_ref()) {
            adamw_step(&mut self.embeddings.token_low, g, st, &adam, lr)?;
        }
        if let (Some(st), Some(g)) = (self.pos_moments.as_mut(), grads.positional.as_ref()) {
            adamw_step(&mut self.embeddings.positional, g, st, &adam, lr)?;
        }
        if let (Some(st), Some(g), Some(h)) = (
            self.head_moments.as_mut(),
            grads.head.as_ref(),
            self.head.as_mut(),
        ) {
            adamw_step(h, g, st, &adam, lr)?;
        }
        self.project_constrained()
    }

    /// Projection pass after an optimizer step: `W_p1` rows, `W_1` columns
    /// and `T_S` rows. `W_p2` is left alone; the row-constant update keeps
    /// it in the subspace.
    fn project_constrained(&mut self) -> Result<()> {
        if !self.constrained {
            return Ok(());
        }
        for (i, l) in self.range.clone().enumerate() {
            if self.layer_constrained(l) {
                let p = &mut self.layers[i];
                p.wp1 = self.subspace.project_matrix_rows(&p.wp1)?;
                p.w1 = self.subspace.project_matrix_cols(&p.w1)?;
            }
        }
        if self.id == 0 {
            self.embeddings.token_low = self
                .subspace
                .project_matrix_rows(&self.embeddings.token_low)?;
        }
        Ok(())
    }

    /// Last stage: takes a Grassmann step and sends the new basis upstream.
    /// Other stages: receive it, pass it on and switch to it.
    fn update_subspace(&mut self, links: &mut Links) -> Result<Vec<FrameRecord>> {
        let mut frames = Vec::new();
        let new = if let Some(acc) = self.accumulator.as_mut() {
            let new = if acc.sample_count() > 0 {
                self.subspace
                    .grassmann_step(acc, self.settings.grassmann_eta as f32)?
            } else {
                self.subspace.clone()
            };
            acc.reset();
            new
        } else {
            let frame = self.recv(links, Direction::Down, MsgType::Subspace, None)?;
            decode_subspace(&frame)?
        };
        if self.id > 0 {
            let frame = encode_subspace(&new)?;
            let charged = frame.wire_len();
            frames.push(self.send(links, Direction::Up, &frame, charged, 0)?);
        }
        self.switch_subspace(new)?;
        Ok(frames)
    }

    /// Re-projects constrained tensors onto `new` and moves their first
    /// moments with them.
    fn switch_subspace(&mut self, new: Subspace) -> Result<()> {
        let old = std::mem::replace(&mut self.subspace, new);
        let new = &self.subspace;
        for (i, l) in self.range.clone().enumerate() {
            if !(self.constrained && l + 1 < self.total_layers) {
                continue;
            }
            let p = &mut self.layers[i];
            p.wp1 = new.project_matrix_rows(&p.wp1)?;
            p.w1 = new.project_matrix_cols(&p.w1)?;
            p.wp2 = new.project_matrix_rows(&p.wp2)?;
            let moments = &mut self.layer_moments[i];
            moments[3].m = rotate_row_moments(&moments[3].m, &old, new)?;
            moments[4].m = rotate_col_moments(&moments[4].m, &old, new)?;
            moments[5].m = rotate_row_moments(&moments[5].m, &old, new)?;
        }
        if self.id == 0 && self.constrained {
            self.embeddings.token_low = new.project_matrix_rows(&self.embeddings.token_low)?;
            if let Some(st) = self.token_moments.as_mut() {
                st.m = rotate_row_moments(&st.m, &old, new)?;
            }
        }
        Ok(())
    }

    fn layer_stats(&self) -> Vec<LayerStats> {
        let sr = |m: &Matrix| stable_rank(m).unwrap_or(f64::NAN);
        let off = |m: &Matrix| {
            self.subspace
                .off_subspace_ratio(m)
                .map(|v| v as f64)
                .unwrap_or(f64::NAN)
        };
        self.range
            .clone()
            .zip(&self.layers)
            .map(|(layer, p)| LayerStats {
                layer,
                stable_rank_p1: sr(&p.wp1),
                stable_rank_p2: sr(&p.wp2),
                offsub_p1: off(&p.wp1),
                offsub_p2: off(&p.wp2),
            })
            .collect()
    }
}
