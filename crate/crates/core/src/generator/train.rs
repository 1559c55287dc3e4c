use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Generator, LossReport, LossWeights};
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::nn::{AdamConfig, AdamState, Graph, ParamStore, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub loss_weights: LossWeights,
    /// Weight of the guided-attention prior added to the training
    /// objective; zero disables it. Never part of the reported total.
    pub guided_attention: f64,
    pub guided_sigma: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Validation interval in steps; zero validates only at the end.
    pub val_every: usize,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            loss_weights: LossWeights::default(),
            guided_attention: 1.0,
            guided_sigma: 0.2,
            seed: 0,
            log_every: 10,
            val_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub split: String,
    #[serde(flatten)]
    pub loss: LossReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub guided_attention: Option<f64>,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_train: LossReport,
    pub last_train: LossReport,
    pub final_val: Option<LossReport>,
    /// Step and total of the lowest validation loss seen.
    pub best_val: Option<(usize, f64)>,
    pub elapsed_s: f64,
    pub records: Vec<TrainLogRecord>,
}

fn report_of<F: Real>(g: &Graph<F>, total: crate::nn::NodeId, terms: &[Option<crate::nn::NodeId>; 5]) -> LossReport {
    let v = |t: Option<crate::nn::NodeId>| t.map_or(0.0, |n| g.scalar(n).to_f64_lossy());
    LossReport {
        total: g.scalar(total).to_f64_lossy(),
        mel_pre: v(terms[0]),
        mel_post: v(terms[1]),
        hand: v(terms[2]),
        lips: v(terms[3]),
        gate: v(terms[4]),
    }
}

fn accumulate(acc: &mut LossReport, r: &LossReport, w: f64) {
    acc.total += w * r.total;
    acc.mel_pre += w * r.mel_pre;
    acc.mel_post += w * r.mel_post;
    acc.hand += w * r.hand;
    acc.lips += w * r.lips;
    acc.gate += w * r.gate;
}

/// Teacher-forced loss over `items`, dropout off except in the prenet,
/// averaged over items.
pub fn evaluate_loss<F: Real>(
    model: &Generator,
    store: &ParamStore<F>,
    items: &[(&[usize], &FeatureBundle)],
    weights: &LossWeights,
    batch_size: usize,
    seed: u64,
) -> Result<LossReport> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = LossReport::default();
    for chunk in items.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let ids: Vec<&[usize]> = chunk.iter().map(|c| c.0).collect();
        let mels: Vec<_> = chunk.iter().map(|c| &c.1.mel).collect();
        let bundles: Vec<&FeatureBundle> = chunk.iter().map(|c| c.1).collect();
        let nodes = model.forward_batch(&mut g, store, &ids, &mels, false, &mut rng)?;
        let (total, terms) = model.batch_loss(&mut g, &nodes, &bundles, weights)?;
        accumulate(&mut acc, &report_of(&g, total, &terms), chunk.len() as f64 / items.len() as f64);
    }
    Ok(acc)
}

/// Adam over shuffled mini-batches, one JSON line per logged step.
pub fn train_generator<F: Real>(
    model: &Generator,
    store: &mut ParamStore<F>,
    train: &[(&[usize], &FeatureBundle)],
    val: &[(&[usize], &FeatureBundle)],
    cfg: &GeneratorTrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    train_generator_tracking_best(model, store, train, val, cfg, log, None)
}

/// [`train_generator`] that also copies the parameters into `best` at each
/// validation point that improves on the lowest validation total so far.
pub fn train_generator_tracking_best<F: Real>(
    model: &Generator,
    store: &mut ParamStore<F>,
    train: &[(&[usize], &FeatureBundle)],
    val: &[(&[usize], &FeatureBundle)],
    cfg: &GeneratorTrainConfig,
    mut log: Option<&mut dyn Write>,
    mut best: Option<&mut ParamStore<F>>,
) -> Result<TrainSummary> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut summary = TrainSummary::default();
    let emit = |rec: TrainLogRecord, summary: &mut TrainSummary, log: &mut Option<&mut dyn Write>| -> Result<()> {
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
        let ids: Vec<&[usize]> = batch.iter().map(|c| c.0).collect();
        let mels: Vec<_> = batch.iter().map(|c| &c.1.mel).collect();
        let bundles: Vec<&FeatureBundle> = batch.iter().map(|c| c.1).collect();
        let nodes = model.forward_batch(&mut g, store, &ids, &mels, true, &mut rng)?;
        let (total, terms) = model.batch_loss(&mut g, &nodes, &bundles, &cfg.loss_weights)?;
        let report = report_of(&g, total, &terms);
        let (objective, guided) = if cfg.guided_attention > 0.0 {
            let ga = model.guided_attention_loss(&mut g, &nodes, cfg.guided_sigma)?;
            let scaled = g.scale(ga, F::from_f64_lossy(cfg.guided_attention));
            (g.add(total, scaled)?, Some(g.scalar(ga).to_f64_lossy()))
        } else {
            (total, None)
        };
        if !report.total.is_finite() {
            return Err(Error::NaNLoss {
                step,
                detail: format!("{report:?}"),
            });
        }
        store.zero_grads();
        g.backward_into(objective, store)?;
        let grad_norm = if cfg.grad_clip > 0.0 {
            store.clip_grad_norm(cfg.grad_clip)
        } else {
            store.grad_norm()
        };
        adam.step(store)?;
        if step == 1 {
            summary.first_train = report;
        }
        summary.last_train = report;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1 || step == cfg.steps) {
            let rec = TrainLogRecord {
                step,
                split: "train".into(),
                loss: report,
                guided_attention: guided,
                grad_norm,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            emit(rec, &mut summary, &mut log)?;
        }
        let val_now = !val.is_empty() && ((cfg.val_every > 0 && step % cfg.val_every == 0) || step == cfg.steps);
        if val_now {
            let v = evaluate_loss(model, store, val, &cfg.loss_weights, cfg.batch_size, cfg.seed ^ 0x5eed)?;
            summary.final_val = Some(v);
            if summary.best_val.is_none_or(|(_, b)| v.total < b) {
                summary.best_val = Some((step, v.total));
                if let Some(b) = best.as_deref_mut() {
                    *b = store.clone();
                    b.clear_grads();
                }
            }
            let rec = TrainLogRecord {
                step,
                split: "val".into(),
                loss: v,
                guided_attention: None,
                grad_norm: 0.0,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            emit(rec, &mut summary, &mut log)?;
        }
    }
    summary.steps = cfg.steps;
    summary.elapsed_s = start.elapsed().as_secs_f64();
    Ok(summary)
}
