//! Audiovisual Tacotron-style generator: phoneme encoder, location-sensitive
//! attention, autoregressive mel decoder with stop gate and postnet, and a
//! linear visual regressor on the second decoder LSTM.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::mat::Mat;
use crate::nn::{bidirectional, dropout, Conv1d, Embedding, Graph, Linear, Lstm, NodeId, ParamStore, Real, SeqLayout};

mod train;

pub use train::{
    evaluate_loss, train_generator, train_generator_tracking_best, GeneratorTrainConfig, TrainLogRecord, TrainSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorPreset {
    /// 512-wide encoder, 2 x 1024 decoder, 5-layer postnet.
    Full,
    /// Same topology at CPU scale.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab: usize,
    pub embedding_dim: usize,
    pub enc_conv_layers: usize,
    pub enc_conv_channels: usize,
    pub enc_conv_kernel: usize,
    /// Total BiLSTM width; each direction gets half.
    pub enc_lstm_dim: usize,
    pub enc_dropout: f64,
    pub attention_dim: usize,
    pub attention_filters: usize,
    pub attention_kernel: usize,
    pub prenet_dim: usize,
    /// Applied in training and at inference.
    pub prenet_dropout: f64,
    pub decoder_lstm_dim: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub postnet_dropout: f64,
    pub n_mels: usize,
    /// Fixed affine applied to log-mel frames entering the prenet and
    /// postnet: `(x - mel_offset) / mel_scale`. The mel head bias starts at
    /// `mel_offset`.
    pub mel_offset: f64,
    pub mel_scale: f64,
    pub visual_dim: usize,
    /// Frames emitted per decoder step; only the last one is fed back.
    pub frames_per_step: usize,
    /// Upper bound on the number of inferred frames.
    pub max_decoder_steps: usize,
    pub gate_threshold: f64,
    pub teacher_forcing_ratio: f64,
}

impl GeneratorConfig {
    pub fn preset(preset: GeneratorPreset, vocab: usize) -> Self {
        match preset {
            GeneratorPreset::Full => Self {
                vocab,
                embedding_dim: 512,
                enc_conv_layers: 3,
                enc_conv_channels: 512,
                enc_conv_kernel: 5,
                enc_lstm_dim: 512,
                enc_dropout: 0.5,
                attention_dim: 128,
                attention_filters: 32,
                attention_kernel: 31,
                prenet_dim: 256,
                prenet_dropout: 0.5,
                decoder_lstm_dim: 1024,
                postnet_layers: 5,
                postnet_channels: 512,
                postnet_kernel: 5,
                postnet_dropout: 0.5,
                n_mels: 80,
                mel_offset: LOG_MEL_MID,
                mel_scale: -LOG_MEL_MID,
                visual_dim: 20,
                frames_per_step: 1,
                max_decoder_steps: 1000,
                gate_threshold: 0.5,
                teacher_forcing_ratio: 1.0,
            },
            GeneratorPreset::Desk => Self {
                vocab,
                embedding_dim: 64,
                enc_conv_layers: 3,
                enc_conv_channels: 64,
                enc_conv_kernel: 5,
                enc_lstm_dim: 64,
                enc_dropout: 0.1,
                attention_dim: 64,
                attention_filters: 8,
                attention_kernel: 15,
                prenet_dim: 64,
                prenet_dropout: 0.5,
                decoder_lstm_dim: 128,
                postnet_layers: 2,
                postnet_channels: 64,
                postnet_kernel: 5,
                postnet_dropout: 0.1,
                n_mels: 80,
                mel_offset: LOG_MEL_MID,
                mel_scale: -LOG_MEL_MID,
                visual_dim: 20,
                frames_per_step: 1,
                max_decoder_steps: 300,
                gate_threshold: 0.5,
                teacher_forcing_ratio: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return bad("gate_threshold must lie in (0, 1)");
        }
        if self.enc_lstm_dim % 2 != 0 {
            return bad("enc_lstm_dim must be even");
        }
        if self.enc_conv_kernel % 2 == 0 || self.attention_kernel % 2 == 0 || self.postnet_kernel % 2 == 0 {
            return bad("kernel sizes must be odd");
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_ratio) {
            return bad("teacher_forcing_ratio must lie in [0, 1]");
        }
        if !(self.mel_scale > 0.0) || !self.mel_offset.is_finite() {
            return bad("mel_scale must be positive and mel_offset finite");
        }
        if self.vocab == 0 || self.frames_per_step == 0 || self.max_decoder_steps == 0 || self.postnet_layers == 0 {
            return bad("vocab, max_decoder_steps and postnet_layers must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyTag {
    #[serde(rename = "s1")]
    S1Scratch,
    #[serde(rename = "s2")]
    S2WarmStart,
    #[serde(rename = "s3")]
    S3FrozenEncoder,
}

impl StrategyTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Self::S1Scratch),
            "s2" => Ok(Self::S2WarmStart),
            "s3" => Ok(Self::S3FrozenEncoder),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (expected s1, s2 or s3)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::S1Scratch => "s1",
            Self::S2WarmStart => "s2",
            Self::S3FrozenEncoder => "s3",
        }
    }
}

/// Midpoint between the log floor `ln(1e-5)` and zero.
pub const LOG_MEL_MID: f64 = -5.756_462_732_485_115;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const VISUAL_PREFIX: &str = "visual.";

/// Weights of the five loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mel_pre: f64,
    pub mel_post: f64,
    pub hand: f64,
    pub lips: f64,
    pub gate: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel_pre: 1.0,
            mel_post: 1.0,
            hand: 1.0,
            lips: 1.0,
            gate: 1.0,
        }
    }
}

impl LossWeights {
    /// Audio and lips only.
    pub fn av_pretrain() -> Self {
        Self {
            hand: 0.0,
            ..Self::default()
        }
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mel_pre: f64,
    pub mel_post: f64,
    pub hand: f64,
    pub lips: f64,
    pub gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    pub mel_pre: Mat,
    pub mel_post: Mat,
    pub visual: Mat,
    pub gate_logits: Vec<f32>,
    /// `T x L` attention weights.
    pub attention: Mat,
    /// Set when inference hit `max_decoder_steps` without the gate firing.
    pub truncated: bool,
}

impl GeneratorOutput {
    pub fn frames(&self) -> usize {
        self.mel_pre.rows
    }

    pub fn hand(&self, k: usize) -> Mat {
        self.visual.slice_cols(0, k)
    }

    pub fn lips(&self, k: usize) -> Mat {
        self.visual.slice_cols(k, self.visual.cols - k)
    }
}

/// Encoder output for a batch: time-major rows for the recurrent layers,
/// item-major rows (`b * L + j`) for attention.
#[derive(Debug, Clone)]
pub struct Memory {
    pub time_major: NodeId,
    pub items: NodeId,
    pub processed: NodeId,
    pub lengths: Vec<usize>,
    pub steps: usize,
}

impl Memory {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// Recurrent decoder state. Created empty; [`Generator::init_state`] fills it.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    memory: Option<Memory>,
    h1: Option<NodeId>,
    c1: Option<NodeId>,
    h2: Option<NodeId>,
    c2: Option<NodeId>,
    ctx: Option<NodeId>,
    prev_w: Option<NodeId>,
    cum_w: Option<NodeId>,
}

impl DecoderState {
    pub fn memory(&self) -> Option<&Memory> {
        self.memory.as_ref()
    }

    pub fn last_weights(&self) -> Option<NodeId> {
        self.prev_w
    }
}

/// Outputs of one decoder step for `B` items; each row holds
/// `frames_per_step` consecutive frames side by side.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub mel: NodeId,
    pub visual: NodeId,
    pub gate: NodeId,
    pub weights: NodeId,
}

/// Graph nodes of a batched decoder run, all time-major over `steps` frames.
#[derive(Debug, Clone)]
pub struct BatchNodes {
    pub mel_pre: NodeId,
    pub mel_post: NodeId,
    pub visual: NodeId,
    pub gate: NodeId,
    /// One `B x L` node per decoder step.
    pub weights: Vec<NodeId>,
    pub frame_lengths: Vec<usize>,
    pub enc_lengths: Vec<usize>,
    /// Padded frame count.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    embedding: Embedding,
    convs: Vec<Conv1d>,
    enc_fwd: Lstm,
    enc_bwd: Lstm,
    att_query: Linear,
    att_memory: Linear,
    att_loc_conv: Conv1d,
    att_loc_dense: Linear,
    att_v: Linear,
    prenet: Linear,
    lstm1: Lstm,
    lstm2: Lstm,
    mel_proj: Linear,
    gate_proj: Linear,
    postnet: Vec<Conv1d>,
    postnet_out: Linear,
    visual_proj: Linear,
}

fn time_major_rows<F: Real>(g: &Graph<F>, node: NodeId, b: usize, batch: usize, len: usize) -> Mat {
    let v = g.value(node);
    let mut data = Vec::with_capacity(len * v.cols);
    for t in 0..len {
        data.extend(v.row(t * batch + b).iter().map(|x| x.to_f64_lossy() as f32));
    }
    Mat {
        rows: len,
        cols: v.cols,
        data,
    }
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embedding_dim;
        let c = cfg.enc_conv_channels;
        let mem = cfg.enc_lstm_dim;
        let h = cfg.decoder_lstm_dim;
        let a = cfg.attention_dim;
        let convs = (0..cfg.enc_conv_layers)
            .map(|i| Conv1d::new(format!("encoder.conv{i}"), if i == 0 { e } else { c }, c, cfg.enc_conv_kernel))
            .collect::<Result<Vec<_>>>()?;
        let enc_in = if cfg.enc_conv_layers == 0 { e } else { c };
        let postnet = (0..cfg.postnet_layers)
            .map(|i| {
                Conv1d::new(
                    format!("postnet.conv{i}"),
                    if i == 0 { cfg.n_mels } else { cfg.postnet_channels },
                    cfg.postnet_channels,
                    cfg.postnet_kernel,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedding: Embedding::new("encoder.embedding", cfg.vocab, e),
            convs,
            enc_fwd: Lstm::new("encoder.lstm_fwd", enc_in, mem / 2),
            enc_bwd: Lstm::new("encoder.lstm_bwd", enc_in, mem / 2),
            att_query: Linear::new("decoder.attention.query", h, a).without_bias(),
            att_memory: Linear::new("decoder.attention.memory", mem, a).without_bias(),
            att_loc_conv: Conv1d::new("decoder.attention.location_conv", 2, cfg.attention_filters, cfg.attention_kernel)?
                .without_bias(),
            att_loc_dense: Linear::new("decoder.attention.location_dense", cfg.attention_filters, a).without_bias(),
            att_v: Linear::new("decoder.attention.v", a, 1).without_bias(),
            prenet: Linear::new("decoder.prenet", cfg.n_mels, cfg.prenet_dim),
            lstm1: Lstm::new("decoder.lstm1", cfg.prenet_dim + mem, h),
            lstm2: Lstm::new("decoder.lstm2", h + mem, h),
            mel_proj: Linear::new("decoder.mel_proj", h + mem, cfg.n_mels * cfg.frames_per_step),
            gate_proj: Linear::new("decoder.gate_proj", h + mem, cfg.frames_per_step),
            postnet,
            postnet_out: Linear::new("postnet.linear", cfg.postnet_channels, cfg.n_mels),
            visual_proj: Linear::new("visual.proj", h, cfg.visual_dim * cfg.frames_per_step),
            cfg,
        })
    }

    /// Fresh parameters: uniform `±1/sqrt(fan_in)` weights, zero biases,
    /// unit LSTM forget bias.
    pub fn init_params<F: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<F> {
        let mut s = ParamStore::new();
        self.embedding.init(&mut s, rng);
        for c in &self.convs {
            c.init(&mut s, rng);
        }
        self.enc_fwd.init(&mut s, rng);
        self.enc_bwd.init(&mut s, rng);
        self.att_query.init(&mut s, rng);
        self.att_memory.init(&mut s, rng);
        self.att_loc_conv.init(&mut s, rng);
        self.att_loc_dense.init(&mut s, rng);
        self.att_v.init(&mut s, rng);
        self.prenet.init(&mut s, rng);
        self.lstm1.init(&mut s, rng);
        self.lstm2.init(&mut s, rng);
        self.mel_proj.init(&mut s, rng);
        if let Some(b) = s.get_mut(&self.mel_proj.bias_name()) {
            let off = F::from_f64_lossy(self.cfg.mel_offset);
            b.data_mut().iter_mut().for_each(|v| *v = off);
        }
        self.gate_proj.init(&mut s, rng);
        for c in &self.postnet {
            c.init(&mut s, rng);
        }
        self.postnet_out.init(&mut s, rng);
        self.init_visual(&mut s, rng);
        s
    }

    pub fn init_visual<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        self.visual_proj.init(store, rng);
    }

    pub fn gate_bias_name(&self) -> String {
        self.gate_proj.bias_name()
    }

    /// Embedding, conv stack (ReLU, dropout when training) and BiLSTM over a
    /// batch of id sequences.
    pub fn encode<F: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        batch: &[&[usize]],
        train: bool,
        rng: &mut R,
    ) -> Result<Memory> {
        if batch.is_empty() || batch.iter().any(|ids| ids.is_empty()) {
            return Err(Error::EmptyInput);
        }
        let b = batch.len();
        let lengths: Vec<usize> = batch.iter().map(|ids| ids.len()).collect();
        let steps = *lengths.iter().max().unwrap();
        let mut ids_tm = vec![0usize; steps * b];
        for (i, ids) in batch.iter().enumerate() {
            for (t, &id) in ids.iter().enumerate() {
                ids_tm[t * b + i] = id;
            }
        }
        let layout = SeqLayout {
            steps,
            batch: b,
            time_major: true,
            lengths: Some(lengths.clone()),
        };
        let mut x = self.embedding.forward(g, store, &ids_tm)?;
        for conv in &self.convs {
            let y = conv.forward(g, store, x, layout.clone())?;
            let y = g.relu(y);
            x = if train { dropout(g, y, self.cfg.enc_dropout, rng)? } else { y };
        }
        let time_major = bidirectional(g, store, &self.enc_fwd, &self.enc_bwd, x, steps, &lengths)?;
        let idx = (0..b)
            .flat_map(|i| (0..steps).map(move |j| Some(j * b + i)))
            .collect();
        let items = g.gather_rows(time_major, idx)?;
        let processed = self.att_memory.forward(g, store, items)?;
        Ok(Memory {
            time_major,
            items,
            processed,
            lengths,
            steps,
        })
    }

    /// Location-sensitive attention. `query` is `B x H`; `cumulative` and
    /// `previous` are `B x L` weight rows.
    pub fn attend<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        query: NodeId,
        memory: &Memory,
        cumulative: NodeId,
        previous: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (b, l) = (memory.batch(), memory.steps);
        if g.dims(cumulative) != (b, l) || g.dims(previous) != (b, l) {
            return Err(Error::DimensionMismatch(format!(
                "attention weights must be {b}x{l}, got {:?} and {:?}",
                g.dims(previous),
                g.dims(cumulative)
            )));
        }
        let prev_col = g.reshape(previous, b * l, 1)?;
        let cum_col = g.reshape(cumulative, b * l, 1)?;
        let loc_in = g.concat_cols(&[prev_col, cum_col])?;
        let layout = SeqLayout {
            steps: l,
            batch: b,
            time_major: false,
            lengths: Some(memory.lengths.clone()),
        };
        let loc = self.att_loc_conv.forward(g, store, loc_in, layout)?;
        let loc = self.att_loc_dense.forward(g, store, loc)?;
        let pq = self.att_query.forward(g, store, query)?;
        let e = g.add(memory.processed, loc)?;
        let e = g.add_repeat_rows(e, pq, l)?;
        let e = g.tanh(e);
        let e = self.att_v.forward(g, store, e)?;
        let e = g.reshape(e, b, l)?;
        let w = g.softmax_rows(e, Some(&memory.lengths))?;
        let ctx = g.attend_context(w, memory.items)?;
        Ok((ctx, w))
    }

    pub fn init_state<F: Real>(&self, g: &mut Graph<F>, memory: Memory) -> DecoderState {
        let b = memory.batch();
        let h = self.cfg.decoder_lstm_dim;
        let e = self.cfg.enc_lstm_dim;
        let prev = g.zeros(b, memory.steps);
        let cum = g.zeros(b, memory.steps);
        DecoderState {
            h1: Some(g.zeros(b, h)),
            c1: Some(g.zeros(b, h)),
            h2: Some(g.zeros(b, h)),
            c2: Some(g.zeros(b, h)),
            ctx: Some(g.zeros(b, e)),
            prev_w: Some(prev),
            cum_w: Some(cum),
            memory: Some(memory),
        }
    }

    fn prenet_forward<F: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        mel: NodeId,
        rng: &mut R,
    ) -> Result<NodeId> {
        let x = self.normalize_mel(g, mel)?;
        let p = self.prenet.forward(g, store, x)?;
        let p = g.relu(p);
        dropout(g, p, self.cfg.prenet_dropout, rng)
    }

    fn normalize_mel<F: Real>(&self, g: &mut Graph<F>, mel: NodeId) -> Result<NodeId> {
        let n = self.cfg.n_mels;
        let shift = g.constant(1, n, vec![F::from_f64_lossy(-self.cfg.mel_offset); n])?;
        let x = g.add_bias(mel, shift)?;
        Ok(g.scale(x, F::from_f64_lossy(1.0 / self.cfg.mel_scale)))
    }

    /// Prenet contribution (weights and bias) to the first LSTM's gates.
    fn lstm1_prenet_gates<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, pre: NodeId) -> Result<NodeId> {
        let w = g.param(store, &self.lstm1.w_ih())?;
        let wp = g.slice_rows(w, 0, self.cfg.prenet_dim)?;
        let bias = g.param(store, &self.lstm1.bias())?;
        let x = g.matmul(pre, wp)?;
        g.add_bias(x, bias)
    }

    /// Recurrent core of one decoder step given the prenet part of the first
    /// LSTM's gates. Returns `(h2, context, weights)`.
    fn step_core<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        pre_gates: NodeId,
        state: &mut DecoderState,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let (Some(h1), Some(c1), Some(h2), Some(c2), Some(ctx), Some(prev), Some(cum)) =
            (state.h1, state.c1, state.h2, state.c2, state.ctx, state.prev_w, state.cum_w)
        else {
            return Err(Error::UninitializedState);
        };
        let memory = state.memory.as_ref().ok_or(Error::UninitializedState)?;
        let w = g.param(store, &self.lstm1.w_ih())?;
        let wc = g.slice_rows(w, self.cfg.prenet_dim, self.cfg.enc_lstm_dim)?;
        let xc = g.matmul(ctx, wc)?;
        let pre = g.add(pre_gates, xc)?;
        let (h1, c1) = self.lstm1.step_from_gates(g, store, pre, h1, c1)?;
        let (ctx, weights) = self.attend(g, store, h1, memory, cum, prev)?;
        let cum = g.add(cum, weights)?;
        let in2 = g.concat_cols(&[h1, ctx])?;
        let (h2, c2) = self.lstm2.step(g, store, in2, h2, c2)?;
        state.h1 = Some(h1);
        state.c1 = Some(c1);
        state.h2 = Some(h2);
        state.c2 = Some(c2);
        state.ctx = Some(ctx);
        state.prev_w = Some(weights);
        state.cum_w = Some(cum);
        Ok((h2, ctx, weights))
    }

    fn heads<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, h2: NodeId, ctx: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let hc = g.concat_cols(&[h2, ctx])?;
        let mel = self.mel_proj.forward(g, store, hc)?;
        let gate = self.gate_proj.forward(g, store, hc)?;
        let visual = self.visual_proj.forward(g, store, h2)?;
        Ok((mel, visual, gate))
    }

    /// One autoregressive step: prenet of the previous mel frame and the last
    /// context drive the two LSTMs; mel and gate come from the second LSTM
    /// output with the new context, the visual frame from the LSTM output alone.
    pub fn decode_step<F: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        prev_mel: NodeId,
        state: &mut DecoderState,
        rng: &mut R,
    ) -> Result<StepOutput> {
        if state.memory.is_none() {
            return Err(Error::UninitializedState);
        }
        let p = self.prenet_forward(g, store, prev_mel, rng)?;
        let pre = self.lstm1_prenet_gates(g, store, p)?;
        let (h2, ctx, weights) = self.step_core(g, store, pre, state)?;
        let (mel, visual, gate) = self.heads(g, store, h2, ctx)?;
        Ok(StepOutput {
            mel,
            visual,
            gate,
            weights,
        })
    }

    fn postnet_forward<F: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        mel_pre: NodeId,
        layout: SeqLayout,
        train: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        let mut x = self.normalize_mel(g, mel_pre)?;
        for conv in &self.postnet {
            let y = conv.forward(g, store, x, layout.clone())?;
            let y = g.tanh(y);
            x = if train { dropout(g, y, self.cfg.postnet_dropout, rng)? } else { y };
        }
        let r = self.postnet_out.forward(g, store, x)?;
        g.add(mel_pre, r)
    }

    /// Reorders per-step rows (`s * B + b`, `r` frames side by side) into
    /// time-major frames, truncated to `frames`.
    fn unfold_steps<F: Real>(&self, g: &mut Graph<F>, x: NodeId, batch: usize, frames: usize) -> Result<NodeId> {
        let r = self.cfg.frames_per_step;
        let (rows, cols) = g.dims(x);
        if r == 1 {
            return g.slice_rows(x, 0, frames * batch);
        }
        let width = cols / r;
        let flat = g.reshape(x, rows * r, width)?;
        let idx = (0..frames * batch)
            .map(|row| {
                let (t, b) = (row / batch, row % batch);
                Some(((t / r) * batch + b) * r + t % r)
            })
            .collect();
        g.gather_rows(flat, idx)
    }

    /// Teacher-forced batched decoder run over `targets` (one mel matrix per
    /// item). Step `s` is fed frame `s * r - 1` of the target, or with a ratio
    /// below 1 and probability `1 - ratio` the model's own last frame.
    pub fn forward_batch<F: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ids: &[&[usize]],
        targets: &[&Mat],
        train: bool,
        rng: &mut R,
    ) -> Result<BatchNodes> {
        if targets.len() != ids.len() {
            return Err(Error::LengthMismatch(format!("{} id sequences, {} targets", ids.len(), targets.len())));
        }
        if targets.iter().any(|t| t.rows == 0) {
            return Err(Error::EmptyTarget);
        }
        let n_mels = self.cfg.n_mels;
        if let Some(t) = targets.iter().find(|t| t.cols != n_mels) {
            return Err(Error::DimensionMismatch(format!("mel targets have {} bands, expected {n_mels}", t.cols)));
        }
        let r = self.cfg.frames_per_step;
        let memory = self.encode(g, store, ids, train, rng)?;
        let enc_lengths = memory.lengths.clone();
        let b = ids.len();
        let frame_lengths: Vec<usize> = targets.iter().map(|t| t.rows).collect();
        let frames = *frame_lengths.iter().max().unwrap();
        let dsteps = frames.div_ceil(r);
        let mut state = self.init_state(g, memory);
        let ratio = self.cfg.teacher_forcing_ratio;
        let fed = |targets: &[&Mat], s: usize, out: &mut [F], base: usize| {
            for (i, t) in targets.iter().enumerate() {
                if s > 0 && s * r - 1 < t.rows {
                    let dst = (base + i) * n_mels;
                    for (d, v) in out[dst..dst + n_mels].iter_mut().zip(t.row(s * r - 1)) {
                        *d = F::from_f64_lossy(*v as f64);
                    }
                }
            }
        };

        let mut h2s = Vec::with_capacity(dsteps);
        let mut ctxs = Vec::with_capacity(dsteps);
        let mut weights = Vec::with_capacity(dsteps);
        let mut mels = Vec::new();
        if ratio >= 1.0 {
            let mut prev = vec![F::zero(); dsteps * b * n_mels];
            for s in 1..dsteps {
                fed(targets, s, &mut prev, s * b);
            }
            let prev = g.constant(dsteps * b, n_mels, prev)?;
            let p = self.prenet_forward(g, store, prev, rng)?;
            let pre_all = self.lstm1_prenet_gates(g, store, p)?;
            for s in 0..dsteps {
                let pre = g.slice_rows(pre_all, s * b, b)?;
                let (h2, ctx, w) = self.step_core(g, store, pre, &mut state)?;
                h2s.push(h2);
                ctxs.push(ctx);
                weights.push(w);
            }
        } else {
            let mut prev_pred: Option<NodeId> = None;
            for s in 0..dsteps {
                let mut truth = vec![F::zero(); b * n_mels];
                fed(targets, s, &mut truth, 0);
                let truth = g.constant(b, n_mels, truth)?;
                let input = match prev_pred {
                    Some(pred) if rng.random::<f64>() >= ratio => pred,
                    _ => truth,
                };
                let out = self.decode_step(g, store, input, &mut state, rng)?;
                prev_pred = Some(g.slice_cols(out.mel, (r - 1) * n_mels, n_mels)?);
                mels.push(out.mel);
                h2s.push(state.h2.expect("set by step"));
                ctxs.push(state.ctx.expect("set by step"));
                weights.push(out.weights);
            }
        }
        let h2_all = g.concat_rows(&h2s)?;
        let ctx_all = g.concat_rows(&ctxs)?;
        let (mel_heads, visual, gate) = self.heads(g, store, h2_all, ctx_all)?;
        let mel_steps = if mels.is_empty() { mel_heads } else { g.concat_rows(&mels)? };
        let mel_pre = self.unfold_steps(g, mel_steps, b, frames)?;
        let visual = self.unfold_steps(g, visual, b, frames)?;
        let gate = self.unfold_steps(g, gate, b, frames)?;
        let layout = SeqLayout {
            steps: frames,
            batch: b,
            time_major: true,
            lengths: Some(frame_lengths.clone()),
        };
        let mel_post = self.postnet_forward(g, store, mel_pre, layout, train, rng)?;
        Ok(BatchNodes {
            mel_pre,
            mel_post,
            visual,
            gate,
            weights,
            frame_lengths,
            enc_lengths,
            steps: frames,
        })
    }

    /// Extracts item `b` of a batched run.
    pub fn output_of<F: Real>(&self, g: &Graph<F>, nodes: &BatchNodes, b: usize) -> GeneratorOutput {
        let batch = nodes.frame_lengths.len();
        let t = nodes.frame_lengths[b];
        let l = nodes.enc_lengths[b];
        let r = self.cfg.frames_per_step;
        let mut att = Vec::with_capacity(t * l);
        for f in 0..t {
            let v = g.value(nodes.weights[f / r]);
            att.extend(v.row(b)[..l].iter().map(|x| x.to_f64_lossy() as f32));
        }
        GeneratorOutput {
            mel_pre: time_major_rows(g, nodes.mel_pre, b, batch, t),
            mel_post: time_major_rows(g, nodes.mel_post, b, batch, t),
            visual: time_major_rows(g, nodes.visual, b, batch, t),
            gate_logits: time_major_rows(g, nodes.gate, b, batch, t).data,
            attention: Mat {
                rows: t,
                cols: l,
                data: att,
            },
            truncated: false,
        }
    }

    pub fn forward_teacher_forced<F: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<F>,
        ids: &[usize],
        target_mel: &Mat,
        rng: &mut R,
    ) -> Result<GeneratorOutput> {
        let mut g = Graph::new();
        let nodes = self.forward_batch(&mut g, store, &[ids], &[target_mel], false, rng)?;
        Ok(self.output_of(&g, &nodes, 0))
    }

    /// Free-running decoding from a zero frame until the gate fires or
    /// `max_decoder_steps` frames exist.
    pub fn infer<F: Real, R: Rng + ?Sized>(&self, store: &ParamStore<F>, ids: &[usize], rng: &mut R) -> Result<GeneratorOutput> {
        let (n, v, r) = (self.cfg.n_mels, self.cfg.visual_dim, self.cfg.frames_per_step);
        let mut g = Graph::new();
        let memory = self.encode(&mut g, store, &[ids], false, rng)?;
        let l = memory.steps;
        let mut state = self.init_state(&mut g, memory);
        let mut prev = g.zeros(1, n);
        let (mut mels, mut visuals, mut gates, mut att) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut truncated = true;
        'decode: while gates.len() < self.cfg.max_decoder_steps {
            let out = self.decode_step(&mut g, store, prev, &mut state, rng)?;
            let w: Vec<f32> = g.value(out.weights).data.iter().map(|x| x.to_f64_lossy() as f32).collect();
            for k in 0..r {
                mels.extend_from_slice(&g.value(out.mel).data[k * n..(k + 1) * n]);
                visuals.extend_from_slice(&g.value(out.visual).data[k * v..(k + 1) * v]);
                let logit = g.value(out.gate).data[k].to_f64_lossy();
                gates.push(logit as f32);
                att.extend_from_slice(&w);
                if 1.0 / (1.0 + (-logit).exp()) > self.cfg.gate_threshold {
                    truncated = false;
                    break 'decode;
                }
                if gates.len() == self.cfg.max_decoder_steps {
                    break 'decode;
                }
            }
            prev = g.slice_cols(out.mel, (r - 1) * n, n)?;
        }
        let t = gates.len();
        let mel_pre = g.constant(t, n, mels)?;
        let visual = g.constant(t, v, visuals)?;
        let mel_post = self.postnet_forward(&mut g, store, mel_pre, SeqLayout::single(t), false, rng)?;
        Ok(GeneratorOutput {
            mel_pre: time_major_rows(&g, mel_pre, 0, 1, t),
            mel_post: time_major_rows(&g, mel_post, 0, 1, t),
            visual: time_major_rows(&g, visual, 0, 1, t),
            gate_logits: gates,
            attention: Mat {
                rows: t,
                cols: l,
                data: att,
            },
            truncated,
        })
    }

    /// Mean attention mass per valid decoder step weighted by
    /// `1 - exp(-(l/L - s/S)^2 / (2 sigma^2))`, a soft prior towards a
    /// monotone alignment.
    pub fn guided_attention_loss<F: Real>(&self, g: &mut Graph<F>, nodes: &BatchNodes, sigma: f64) -> Result<NodeId> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("guided attention width must be positive, got {sigma}")));
        }
        let r = self.cfg.frames_per_step;
        let b = nodes.frame_lengths.len();
        let (_, l_max) = g.dims(nodes.weights[0]);
        let steps = nodes.weights.len();
        let mut penalty = vec![F::zero(); steps * b * l_max];
        let mut valid = 0usize;
        for i in 0..b {
            let (s_len, l_len) = (nodes.frame_lengths[i].div_ceil(r), nodes.enc_lengths[i]);
            valid += s_len;
            for s in 0..s_len {
                let y = (s as f64 + 0.5) / s_len as f64;
                let row = &mut penalty[(s * b + i) * l_max..][..l_len];
                for (l, p) in row.iter_mut().enumerate() {
                    let d = (l as f64 + 0.5) / l_len as f64 - y;
                    *p = F::from_f64_lossy(1.0 - (-d * d / (2.0 * sigma * sigma)).exp());
                }
            }
        }
        let all = g.concat_rows(&nodes.weights)?;
        let penalty = g.constant(steps * b, l_max, penalty)?;
        let weighted = g.mul(all, penalty)?;
        let total = g.sum(weighted);
        Ok(g.scale(total, F::from_f64_lossy(1.0 / valid as f64)))
    }

    /// Weighted loss terms of a batched run as graph nodes: total first, then
    /// mel_pre, mel_post, hand, lips, gate contributions. Terms with weight zero
    /// are left out of the graph.
    pub fn batch_loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        nodes: &BatchNodes,
        bundles: &[&FeatureBundle],
        w: &LossWeights,
    ) -> Result<(NodeId, [Option<NodeId>; 5])> {
        let b = bundles.len();
        if b != nodes.frame_lengths.len() {
            return Err(Error::LengthMismatch("bundle count differs from batch".into()));
        }
        let steps = nodes.steps;
        let n_mels = self.cfg.n_mels;
        let k_hand = bundles[0].hand.cols;
        let k_lips = bundles[0].lips.cols;
        if k_hand + k_lips != self.cfg.visual_dim {
            return Err(Error::DimensionMismatch(format!(
                "visual head has {} outputs, bundles carry {k_hand} + {k_lips}",
                self.cfg.visual_dim
            )));
        }
        let mut mel = vec![F::zero(); steps * b * n_mels];
        let mut hand = vec![F::zero(); steps * b * k_hand];
        let mut lips = vec![F::zero(); steps * b * k_lips];
        let mut gate = vec![F::zero(); steps * b];
        let mut mask = vec![false; steps * b];
        for (i, bu) in bundles.iter().enumerate() {
            let t_len = bu.frames();
            if t_len != nodes.frame_lengths[i] || bu.hand.rows != t_len || bu.lips.rows != t_len || bu.gate.len() != t_len {
                return Err(Error::LengthMismatch(format!(
                    "item {i}: output has {} frames, bundle {t_len}",
                    nodes.frame_lengths[i]
                )));
            }
            for t in 0..t_len {
                let r = t * b + i;
                mask[r] = true;
                gate[r] = F::from_f64_lossy(bu.gate[t] as f64);
                for (d, v) in mel[r * n_mels..(r + 1) * n_mels].iter_mut().zip(bu.mel.row(t)) {
                    *d = F::from_f64_lossy(*v as f64);
                }
                for (d, v) in hand[r * k_hand..(r + 1) * k_hand].iter_mut().zip(bu.hand.row(t)) {
                    *d = F::from_f64_lossy(*v as f64);
                }
                for (d, v) in lips[r * k_lips..(r + 1) * k_lips].iter_mut().zip(bu.lips.row(t)) {
                    *d = F::from_f64_lossy(*v as f64);
                }
            }
        }
        let mut terms: [Option<NodeId>; 5] = [None; 5];
        let weights = [w.mel_pre, w.mel_post, w.hand, w.lips, w.gate];
        for (k, &wk) in weights.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let raw = match k {
                0 => g.masked_mse(nodes.mel_pre, mel.clone(), mask.clone())?,
                1 => g.masked_mse(nodes.mel_post, mel.clone(), mask.clone())?,
                2 => {
                    let v = g.slice_cols(nodes.visual, 0, k_hand)?;
                    g.masked_mse(v, hand.clone(), mask.clone())?
                }
                3 => {
                    let v = g.slice_cols(nodes.visual, k_hand, k_lips)?;
                    g.masked_mse(v, lips.clone(), mask.clone())?
                }
                _ => g.bce_with_logits(nodes.gate, gate.clone(), mask.clone())?,
            };
            terms[k] = Some(if wk == 1.0 { raw } else { g.scale(raw, F::from_f64_lossy(wk)) });
        }
        let present: Vec<NodeId> = terms.iter().flatten().copied().collect();
        let mut total = match present.first() {
            Some(&t) => t,
            None => return Err(Error::Config("every loss weight is zero".into())),
        };
        for &t in &present[1..] {
            total = g.add(total, t)?;
        }
        Ok((total, terms))
    }
}

fn mse(a: &Mat, b: &Mat) -> f64 {
    let n = a.data.len().max(1) as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / n
}

fn bce_logits(logits: &[f32], target: &[f32]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&x, &z)| {
            let x = x as f64;
            x.max(0.0) - x * z as f64 + (1.0 + (-x.abs()).exp()).ln()
        })
        .sum::<f64>()
        / n
}

/// Weighted loss of one output against its bundle.
pub fn loss(output: &GeneratorOutput, bundle: &FeatureBundle, w: &LossWeights) -> Result<LossReport> {
    let t = output.frames();
    if bundle.frames() != t || output.visual.rows != t || output.gate_logits.len() != t {
        return Err(Error::LengthMismatch(format!(
            "output has {t} frames, target {}",
            bundle.frames()
        )));
    }
    let k = bundle.hand.cols;
    let mut r = LossReport {
        mel_pre: w.mel_pre * mse(&output.mel_pre, &bundle.mel),
        mel_post: w.mel_post * mse(&output.mel_post, &bundle.mel),
        hand: w.hand * mse(&output.hand(k), &bundle.hand),
        lips: w.lips * mse(&output.lips(k), &bundle.lips),
        gate: w.gate * bce_logits(&output.gate_logits, &bundle.gate),
        total: 0.0,
    };
    r.total = r.mel_pre + r.mel_post + r.hand + r.lips + r.gate;
    Ok(r)
}

/// Builds the starting parameters of a training run.
///
/// S1 draws every tensor fresh. S2 copies every tensor from `checkpoint`
/// except the visual regressor, which is drawn fresh. S3 is S2 with the
/// encoder frozen.
pub fn apply_strategy<F: Real, R: Rng + ?Sized>(
    model: &Generator,
    tag: StrategyTag,
    checkpoint: Option<&ParamStore<F>>,
    rng: &mut R,
) -> Result<ParamStore<F>> {
    let mut fresh: ParamStore<F> = model.init_params(rng);
    if tag == StrategyTag::S1Scratch {
        fresh.set_freeze_mask(BTreeSet::new());
        return Ok(fresh);
    }
    let ck = checkpoint.ok_or_else(|| Error::MissingCheckpoint(tag.as_str().into()))?;
    let names: Vec<String> = fresh.names().map(str::to_string).collect();
    for name in &names {
        if name.starts_with(VISUAL_PREFIX) {
            continue;
        }
        let src = ck
            .get(name)
            .ok_or_else(|| Error::NameMismatch(format!("`{name}` missing from checkpoint")))?;
        let dst = fresh.get(name).expect("listed");
        if src.shape() != dst.shape() {
            return Err(Error::NameMismatch(format!(
                "`{name}` has shape {:?} in checkpoint, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        let mut t = src.clone();
        t.grad = None;
        fresh.insert(name.clone(), t);
    }
    if let Some(extra) = ck.names().find(|n| !fresh.contains(n) && !n.starts_with(VISUAL_PREFIX)) {
        return Err(Error::NameMismatch(format!("checkpoint tensor `{extra}` is unknown to the model")));
    }
    fresh.set_freeze_mask(BTreeSet::new());
    if tag == StrategyTag::S3FrozenEncoder {
        fresh.freeze_prefix(ENCODER_PREFIX);
    }
    Ok(fresh)
}
