//! CTC phoneme recognizer over hand and lip coefficients: one Bi-GRU per
//! stream, a fusion Bi-GRU over their concatenation and a linear softmax
//! layer. Class 0 is the blank.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::metrics::{corpus_accuracy, AccuracyReport};
use crate::nn::{bidirectional, ctc_nll, ctc_required_frames, AdamConfig, AdamState, CtcItem, Graph, Gru, Linear, NodeId, ParamStore, Real};

pub const BLANK: usize = 0;
pub const OUTPUT_PREFIX: &str = "output.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub hand_input: usize,
    pub lips_input: usize,
    /// Hidden size of each direction of the per-stream GRUs.
    pub stream_hidden: usize,
    /// Hidden size of each direction of the fusion GRU.
    pub fusion_hidden: usize,
    /// Label count plus one for the blank.
    pub classes: usize,
    /// Fixed gain on the input coefficients, which are small in raw units.
    pub input_scale: f64,
}

impl RecognizerConfig {
    pub fn desk(num_labels: usize) -> Self {
        Self {
            hand_input: 10,
            lips_input: 10,
            stream_hidden: 64,
            fusion_hidden: 128,
            classes: num_labels + 1,
            input_scale: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("recognizer needs at least one label besides the blank".into()));
        }
        if !(self.input_scale > 0.0) {
            return Err(Error::Config("input_scale must be positive".into()));
        }
        if self.hand_input == 0 || self.lips_input == 0 || self.stream_hidden == 0 || self.fusion_hidden == 0 {
            return Err(Error::Config("recognizer dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One training or scoring item. Labels are class indices in `1..classes`.
#[derive(Debug, Clone, Copy)]
pub struct CtcExample<'a> {
    pub hand: &'a Mat,
    pub lips: &'a Mat,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recognizer {
    pub cfg: RecognizerConfig,
    hand_fwd: Gru,
    hand_bwd: Gru,
    lips_fwd: Gru,
    lips_bwd: Gru,
    fusion_fwd: Gru,
    fusion_bwd: Gru,
    output: Linear,
}

/// Time-major log-probabilities of a batch, rows `t * B + b`.
#[derive(Debug, Clone)]
pub struct RecognizerNodes {
    pub log_probs: NodeId,
    pub steps: usize,
    pub lengths: Vec<usize>,
}

/// Natural-log CTC loss of one item. Rows of `exp(log_probs)` must sum to 1.
pub fn ctc_loss(log_probs: &Mat, labels: &[usize]) -> Result<f64> {
    for r in 0..log_probs.rows {
        let s: f64 = log_probs.row(r).iter().map(|&v| (v as f64).exp()).sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::NonStochasticRows(format!("log-prob row {r} exponentiates to {s}")));
        }
    }
    let lp: Vec<f64> = log_probs.data.iter().map(|&v| v as f64).collect();
    ctc_nll(&lp, log_probs.cols, labels, BLANK)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Best path: per-frame argmax (ties to the lowest class), repeats
/// collapsed, blanks removed.
pub fn greedy_decode(log_probs: &Mat) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for r in 0..log_probs.rows {
        let k = argmax(log_probs.row(r));
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn to_time_major<F: Real>(mats: &[&Mat], steps: usize, scale: f64, noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>) -> Vec<F> {
    let b = mats.len();
    let d = mats[0].cols;
    let mut out = vec![F::zero(); steps * b * d];
    let mut noise = noise;
    for (i, m) in mats.iter().enumerate() {
        for t in 0..m.rows {
            let dst = &mut out[(t * b + i) * d..][..d];
            for (o, &v) in dst.iter_mut().zip(m.row(t)) {
                let e = match noise.as_mut() {
                    Some((dist, rng)) => dist.sample(*rng),
                    None => 0.0,
                };
                *o = F::from_f64_lossy((v as f64 + e) * scale);
            }
        }
    }
    out
}

impl Recognizer {
    pub fn new(cfg: RecognizerConfig) -> Result<Self> {
        cfg.validate()?;
        let (s, f) = (cfg.stream_hidden, cfg.fusion_hidden);
        Ok(Self {
            hand_fwd: Gru::new("hand.gru_fwd", cfg.hand_input, s),
            hand_bwd: Gru::new("hand.gru_bwd", cfg.hand_input, s),
            lips_fwd: Gru::new("lips.gru_fwd", cfg.lips_input, s),
            lips_bwd: Gru::new("lips.gru_bwd", cfg.lips_input, s),
            fusion_fwd: Gru::new("fusion.gru_fwd", 4 * s, f),
            fusion_bwd: Gru::new("fusion.gru_bwd", 4 * s, f),
            output: Linear::new("output.linear", 2 * f, cfg.classes),
            cfg,
        })
    }

    pub fn init_params<F: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for gru in [&self.hand_fwd, &self.hand_bwd, &self.lips_fwd, &self.lips_bwd, &self.fusion_fwd, &self.fusion_bwd] {
            gru.init(&mut store, rng);
        }
        self.output.init(&mut store, rng);
        store
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    /// Batched forward pass. Items may differ in length; hand and lips of one
    /// item must not.
    pub fn forward_batch<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        items: &[(&Mat, &Mat)],
        noise: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<RecognizerNodes> {
        if items.is_empty() {
            return Err(Error::EmptyInput);
        }
        for (i, (h, l)) in items.iter().enumerate() {
            if h.rows != l.rows {
                return Err(Error::LengthMismatch(format!("item {i}: hand has {} frames, lips {}", h.rows, l.rows)));
            }
            if h.rows == 0 {
                return Err(Error::EmptyInput);
            }
            if h.cols != self.cfg.hand_input || l.cols != self.cfg.lips_input {
                return Err(Error::DimensionMismatch(format!(
                    "item {i}: streams have {} + {} coefficients, expected {} + {}",
                    h.cols, l.cols, self.cfg.hand_input, self.cfg.lips_input
                )));
            }
        }
        let lengths: Vec<usize> = items.iter().map(|(h, _)| h.rows).collect();
        let steps = *lengths.iter().max().unwrap();
        let b = items.len();
        let hands: Vec<&Mat> = items.iter().map(|x| x.0).collect();
        let lips: Vec<&Mat> = items.iter().map(|x| x.1).collect();
        let scale = self.cfg.input_scale;
        let (hx, lx) = match noise {
            Some((sigma, rng)) if sigma > 0.0 => {
                let dist = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                let hx = to_time_major::<F>(&hands, steps, scale, Some((&dist, &mut *rng)));
                (hx, to_time_major::<F>(&lips, steps, scale, Some((&dist, rng))))
            }
            _ => (to_time_major::<F>(&hands, steps, scale, None), to_time_major::<F>(&lips, steps, scale, None)),
        };
        let hx = g.constant(steps * b, self.cfg.hand_input, hx)?;
        let lx = g.constant(steps * b, self.cfg.lips_input, lx)?;
        let hs = bidirectional(g, store, &self.hand_fwd, &self.hand_bwd, hx, steps, &lengths)?;
        let ls = bidirectional(g, store, &self.lips_fwd, &self.lips_bwd, lx, steps, &lengths)?;
        let fused_in = g.concat_cols(&[hs, ls])?;
        let fused = bidirectional(g, store, &self.fusion_fwd, &self.fusion_bwd, fused_in, steps, &lengths)?;
        let logits = self.output.forward(g, store, fused)?;
        Ok(RecognizerNodes {
            log_probs: g.log_softmax_rows(logits),
            steps,
            lengths,
        })
    }

    /// Mean CTC loss node of a batch run.
    pub fn batch_loss<F: Real>(&self, g: &mut Graph<F>, nodes: &RecognizerNodes, labels: &[&[usize]]) -> Result<NodeId> {
        let b = nodes.lengths.len();
        if labels.len() != b {
            return Err(Error::LengthMismatch(format!("{} label sequences for {b} items", labels.len())));
        }
        let items = labels
            .iter()
            .enumerate()
            .map(|(i, l)| CtcItem {
                rows: (0..nodes.lengths[i]).map(|t| t * b + i).collect(),
                labels: l.to_vec(),
            })
            .collect();
        g.ctc(nodes.log_probs, items, BLANK)
    }

    /// `T x classes` log-probabilities of one item.
    pub fn log_probs<F: Real>(&self, store: &ParamStore<F>, hand: &Mat, lips: &Mat) -> Result<Mat> {
        let mut g = Graph::new();
        let nodes = self.forward_batch(&mut g, store, &[(hand, lips)], None)?;
        let v = g.value(nodes.log_probs);
        Ok(Mat {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|x| x.to_f64_lossy() as f32).collect(),
        })
    }

    /// Greedy label sequence for one item.
    pub fn recognize<F: Real>(&self, store: &ParamStore<F>, hand: &Mat, lips: &Mat) -> Result<Vec<usize>> {
        Ok(greedy_decode(&self.log_probs(store, hand, lips)?))
    }

    /// Pooled accuracy of the greedy decodes against the item labels.
    pub fn accuracy<F: Real>(&self, store: &ParamStore<F>, items: &[CtcExample<'_>]) -> Result<AccuracyReport> {
        let pairs = items
            .iter()
            .map(|it| Ok((it.labels.to_vec(), self.recognize(store, it.hand, it.lips)?)))
            .collect::<Result<Vec<_>>>()?;
        corpus_accuracy(&pairs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    /// Standard deviation of Gaussian noise added to the raw input
    /// coefficients during training; zero disables it.
    pub input_noise: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Validation interval in steps; zero validates only at the end.
    pub val_every: usize,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            input_noise: 0.03,
            seed: 0,
            log_every: 50,
            val_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerLogRecord {
    pub step: usize,
    pub split: String,
    pub ctc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecognizerSummary {
    pub steps: usize,
    pub first_ctc: f64,
    pub last_ctc: f64,
    pub final_val: Option<AccuracyReport>,
    pub elapsed_s: f64,
    pub records: Vec<RecognizerLogRecord>,
}

fn check_feasible(items: &[CtcExample<'_>], classes: usize) -> Result<()> {
    for it in items {
        if it.labels.iter().any(|&l| l == BLANK || l >= classes) {
            return Err(Error::Config(format!("labels must lie in 1..{classes}")));
        }
        let needed = ctc_required_frames(it.labels);
        if needed > it.hand.rows {
            return Err(Error::InfeasibleLabel {
                label_len: it.labels.len(),
                needed,
                frames: it.hand.rows,
            });
        }
    }
    Ok(())
}

/// Adam on the CTC loss over shuffled mini-batches. Frozen parameters in
/// `store` stay untouched.
pub fn train_recognizer<F: Real>(
    model: &Recognizer,
    store: &mut ParamStore<F>,
    train: &[CtcExample<'_>],
    val: &[CtcExample<'_>],
    cfg: &RecognizerTrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<RecognizerSummary> {
    if cfg.steps > 0 && train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    check_feasible(train, model.cfg.classes)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut summary = RecognizerSummary::default();
    let mut emit = |rec: RecognizerLogRecord, summary: &mut RecognizerSummary| -> Result<()> {
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut **w, &rec)?;
            writeln!(w)?;
        }
        summary.records.push(rec);
        Ok(())
    };
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]]);
            cursor += 1;
        }
        let mut g = Graph::new();
        let feats: Vec<(&Mat, &Mat)> = batch.iter().map(|it| (it.hand, it.lips)).collect();
        let labels: Vec<&[usize]> = batch.iter().map(|it| it.labels).collect();
        let nodes = model.forward_batch(&mut g, store, &feats, Some((cfg.input_noise, &mut rng)))?;
        let loss = model.batch_loss(&mut g, &nodes, &labels)?;
        let ctc = g.scalar(loss).to_f64_lossy();
        if !ctc.is_finite() {
            return Err(Error::NaNLoss {
                step,
                detail: format!("ctc {ctc}"),
            });
        }
        store.zero_grads();
        g.backward_into(loss, store)?;
        let grad_norm = if cfg.grad_clip > 0.0 {
            store.clip_grad_norm(cfg.grad_clip)
        } else {
            store.grad_norm()
        };
        adam.step(store)?;
        if step == 1 {
            summary.first_ctc = ctc;
        }
        summary.last_ctc = ctc;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1 || step == cfg.steps) {
            let rec = RecognizerLogRecord {
                step,
                split: "train".into(),
                ctc,
                accuracy: None,
                grad_norm,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            emit(rec, &mut summary)?;
        }
        if !val.is_empty() && ((cfg.val_every > 0 && step % cfg.val_every == 0) || step == cfg.steps) {
            let acc = model.accuracy(store, val)?;
            let ctc = mean_ctc(model, store, val, cfg.batch_size)?;
            summary.final_val = Some(acc);
            let rec = RecognizerLogRecord {
                step,
                split: "val".into(),
                ctc,
                accuracy: Some(acc.acc),
                grad_norm: 0.0,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            emit(rec, &mut summary)?;
        }
    }
    summary.steps = cfg.steps;
    summary.elapsed_s = start.elapsed().as_secs_f64();
    Ok(summary)
}

/// Mean per-item CTC loss.
pub fn mean_ctc<F: Real>(model: &Recognizer, store: &ParamStore<F>, items: &[CtcExample<'_>], batch_size: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for chunk in items.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let feats: Vec<(&Mat, &Mat)> = chunk.iter().map(|it| (it.hand, it.lips)).collect();
        let labels: Vec<&[usize]> = chunk.iter().map(|it| it.labels).collect();
        let nodes = model.forward_batch(&mut g, store, &feats, None)?;
        let loss = model.batch_loss(&mut g, &nodes, &labels)?;
        total += g.scalar(loss).to_f64_lossy() * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Copy of `store` trained on `items` with everything but the output layer
/// frozen. The returned store carries no freeze mask.
pub fn finetune_last_layer<F: Real>(
    model: &Recognizer,
    store: &ParamStore<F>,
    items: &[CtcExample<'_>],
    cfg: &RecognizerTrainConfig,
) -> Result<(ParamStore<F>, RecognizerSummary)> {
    let mut tuned = store.clone();
    tuned.clear_grads();
    if cfg.steps == 0 {
        return Ok((tuned, RecognizerSummary::default()));
    }
    tuned.freeze_all_except(OUTPUT_PREFIX);
    let summary = train_recognizer(model, &mut tuned, items, &[], cfg, None)?;
    tuned.unfreeze_all();
    tuned.clear_grads();
    Ok((tuned, summary))
}
