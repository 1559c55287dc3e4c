use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{load_corpus, load_features, split_ids, write_corpus, CorpusKind, FeatureSet, Split};
use super::plot::{attention_svg, overlay_svg, OverlayPlot};
use super::{run_stage, ExperimentConfig, Layout};
use crate::cuer::{generate_corpus, CorpusSpec, CuerProfile, SAMPLE_RATE};
use crate::domain::CueConfig;
use crate::error::{Error, Result};
use crate::features::{build_bundle_with_bank, fit_stream_pcas, MelConfig, MelFilterbank, PcaModel, PCA_COMPONENTS};
use crate::generator::{apply_strategy, train_generator_tracking_best, Generator, GeneratorTrainConfig, StrategyTag};
use crate::io::{read_frames, read_json, read_jsonl, write_frames, write_json, write_jsonl};
use crate::mat::Mat;
use crate::metrics::{align_count, attention_diagonality, corpus_accuracy, dtw};
use crate::nn::{ctc_required_frames, load_checkpoint, save_checkpoint, ParamStore};
use crate::recognizer::{finetune_last_layer, train_recognizer, CtcExample, Recognizer, RecognizerTrainConfig};

pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const INIT_CKPT: &str = "init.ckpt";
pub const ACSR_CKPT: &str = "model.ckpt";
pub const GENERATED_INDEX: &str = "generated.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Text to audio and lips on the audiovisual corpus.
    Av,
    /// Cued-speech fine-tuning with the given strategy.
    Cs(StrategyTag),
}

impl Phase {
    pub fn name(self) -> String {
        match self {
            Phase::Av => "av".into(),
            Phase::Cs(tag) => format!("cs-{}", tag.as_str()),
        }
    }
}

/// One line of `generated.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub id: String,
    pub split: String,
    pub frames: usize,
    pub reference_frames: usize,
    pub truncated: bool,
    pub diagonality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "I")]
    pub i: usize,
    pub truncated: bool,
}

/// Pooled accuracy of one scored feature source. Holds no timings so that
/// identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `s1`, `s2`, `s3` or `oracle`.
    pub source: String,
    pub seed: u64,
    pub finetune_last_layer: bool,
    pub config_hash: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "I")]
    pub i: usize,
    pub acc: f64,
    pub truncated: usize,
    pub utterances: Vec<UtteranceScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub source: String,
    pub finetune_last_layer: bool,
    pub per_seed: BTreeMap<u64, f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<StrategySummary>,
}

impl ExperimentReport {
    pub fn median(&self, source: &str, finetune: bool) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.source == source && r.finetune_last_layer == finetune)
            .map(|r| r.median)
    }
}

/// Which features `cmd_evaluate` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSource {
    Generated(StrategyTag),
    /// Ground-truth features of the cued-speech test items.
    Oracle,
}

fn corpus_spec(cfg: &ExperimentConfig, kind: CorpusKind) -> CorpusSpec {
    let (n, salt) = match kind {
        CorpusKind::Av => (cfg.av_pretrain_n, 0),
        CorpusKind::Cs => (cfg.cs_train_n, 1),
    };
    CorpusSpec {
        n_utterances: n,
        length_range: cfg.length_range,
        duration_range_ms: cfg.duration_range_ms,
        seed: cfg.data_seed.wrapping_mul(2).wrapping_add(salt),
    }
}

fn profile(cfg: &ExperimentConfig, cue: &CueConfig, kind: CorpusKind) -> CuerProfile {
    let f0 = match kind {
        CorpusKind::Av => cfg.av_f0_hz,
        CorpusKind::Cs => cfg.cs_f0_hz,
    };
    let mut p = CuerProfile::from_config(cue, f0);
    p.landmark_noise_std = cfg.landmark_noise_std;
    p
}

/// Synthesizes both corpora with their train/test splits.
pub fn cmd_synth_data(layout: &Layout, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    let outputs = [layout.corpus(CorpusKind::Av), layout.corpus(CorpusKind::Cs)];
    run_stage(layout, cfg, "synth-data", &[], &outputs, force, || {
        let cue = cfg.cue()?;
        for (k, kind) in [CorpusKind::Av, CorpusKind::Cs].into_iter().enumerate() {
            let (utts, manifest) = generate_corpus(&corpus_spec(cfg, kind), &profile(cfg, &cue, kind), &cue)?;
            let ids: Vec<String> = utts.iter().map(|u| u.id.clone()).collect();
            let split = split_ids(&ids, cfg.cs_test_fraction, cfg.data_seed ^ (0xA5 + k as u64));
            write_corpus(&layout.corpus(kind), &utts, &manifest, &split, SAMPLE_RATE)?;
        }
        Ok(())
    })
}

/// Fits one PCA per visual stream on the audiovisual training split and
/// writes the feature bundles of both corpora.
pub fn cmd_fit_pca(layout: &Layout, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let inputs = [layout.corpus(CorpusKind::Av), layout.corpus(CorpusKind::Cs)];
    let outputs = [layout.pca(), layout.features(CorpusKind::Av), layout.features(CorpusKind::Cs)];
    run_stage(layout, cfg, "fit-pca", &inputs, &outputs, force, || {
        let cue = cfg.cue()?;
        let (av, _, split) = load_corpus(&layout.corpus(CorpusKind::Av), &cue)?;
        let fit: Vec<_> = av.iter().filter(|u| split.train.contains(&u.id)).collect();
        let (ph, pl) = fit_stream_pcas(&fit, PCA_COMPONENTS)?;
        write_json(&layout.pca().join("hand.json"), &ph)?;
        write_json(&layout.pca().join("lips.json"), &pl)?;
        let mel = MelConfig::default();
        let bank = MelFilterbank::new(&mel);
        for kind in [CorpusKind::Av, CorpusKind::Cs] {
            let utts = if kind == CorpusKind::Av { av.clone() } else { load_corpus(&layout.corpus(kind), &cue)?.0 };
            let set = FeatureSet {
                ids: utts.iter().map(|u| u.id.clone()).collect(),
                phonemes: utts.iter().map(|u| u.seq.phonemes.clone()).collect(),
                bundles: utts
                    .iter()
                    .map(|u| build_bundle_with_bank(u, &mel, &bank, &ph, &pl))
                    .collect::<Result<_>>()?,
            };
            set.write(&layout.features(kind))?;
        }
        Ok(())
    })
}

pub fn load_pcas(layout: &Layout) -> Result<(PcaModel, PcaModel)> {
    Ok((read_json(&layout.pca().join("hand.json"))?, read_json(&layout.pca().join("lips.json"))?))
}

fn read_split(layout: &Layout, kind: CorpusKind) -> Result<Split> {
    read_json(&layout.corpus(kind).join("split.json"))
}

fn features(layout: &Layout, cue: &CueConfig, kind: CorpusKind) -> Result<FeatureSet> {
    load_features(&layout.features(kind), &layout.corpus(kind), cue)
}

fn ctc_items<'a>(set: &'a FeatureSet, idx: &[usize], labels: &'a [Vec<usize>]) -> Vec<CtcExample<'a>> {
    idx.iter()
        .map(|&i| CtcExample {
            hand: &set.bundles[i].hand,
            lips: &set.bundles[i].lips,
            labels: &labels[i],
        })
        .collect()
}

fn open_log(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Trains the recognizer on oracle features of the audiovisual training
/// split, validating on its test split.
pub fn cmd_train_acsr(layout: &Layout, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let inputs = [layout.corpus(CorpusKind::Av), layout.features(CorpusKind::Av)];
    run_stage(layout, cfg, "train-acsr", &inputs, &[layout.acsr()], force, || {
        let cue = cfg.cue()?;
        let set = features(layout, &cue, CorpusKind::Av)?;
        let split = read_split(layout, CorpusKind::Av)?;
        let labels: Vec<Vec<usize>> = set.phonemes.iter().map(|p| cue.inventory.labels(p)).collect();
        let train = ctc_items(&set, &set.indices(&split.train)?, &labels);
        let val = ctc_items(&set, &set.indices(&split.test)?, &labels);
        let model = Recognizer::new(cfg.recognizer.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
        let mut store: ParamStore<f32> = model.init_params(&mut rng);
        let tc = RecognizerTrainConfig {
            steps: cfg.capped(cfg.recognizer_train.steps),
            seed: cfg.data_seed,
            ..cfg.recognizer_train.clone()
        };
        let mut log = open_log(&layout.acsr().join("log.jsonl"))?;
        let summary = train_recognizer(&model, &mut store, &train, &val, &tc, Some(&mut log))?;
        log.flush()?;
        save_checkpoint(&store, &layout.acsr().join(ACSR_CKPT))?;
        write_json(&layout.acsr().join("summary.json"), &summary)?;
        Ok(())
    })
}

pub fn load_recognizer(layout: &Layout, cfg: &ExperimentConfig) -> Result<(Recognizer, ParamStore<f32>)> {
    Ok((Recognizer::new(cfg.recognizer.clone())?, load_checkpoint(&layout.acsr().join(ACSR_CKPT))?))
}

fn train_dir(layout: &Layout, seed: u64, phase: Phase) -> PathBuf {
    match phase {
        Phase::Av => layout.pretrain(seed),
        Phase::Cs(tag) => layout.finetune(seed, tag),
    }
}

/// One training phase. The audiovisual phase starts from a fresh
/// initialization; the cued-speech phase applies its strategy to the
/// pretrained checkpoint. Writes `init`, `final` and `best` checkpoints,
/// the JSONL log and a summary.
pub fn cmd_train(layout: &Layout, cfg: &ExperimentConfig, phase: Phase, force: bool) -> Result<()> {
    cfg.validate()?;
    let seed = cfg.seed;
    let (kind, base) = match phase {
        Phase::Av => (CorpusKind::Av, &cfg.pretrain),
        Phase::Cs(_) => (CorpusKind::Cs, &cfg.finetune),
    };
    let mut inputs = vec![layout.corpus(kind).join("split.json"), layout.features(kind)];
    if let Phase::Cs(tag) = phase {
        if tag != StrategyTag::S1Scratch {
            inputs.push(layout.pretrain(seed).join(FINAL_CKPT));
        }
    }
    let dir = train_dir(layout, seed, phase);
    let stage = format!("train-{}/seed-{seed}", phase.name());
    run_stage(layout, cfg, &stage, &inputs, &[dir.clone()], force, || {
        let cue = cfg.cue()?;
        let model = Generator::new(cfg.generator(&cue)?)?;
        let set = features(layout, &cue, kind)?;
        let split = read_split(layout, kind)?;
        let (tr, va) = (set.indices(&split.train)?, set.indices(&split.test)?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store: ParamStore<f32> = match phase {
            Phase::Av => model.init_params(&mut rng),
            Phase::Cs(tag) => {
                let ck = if tag == StrategyTag::S1Scratch {
                    None
                } else {
                    Some(load_checkpoint::<f32>(&layout.pretrain(seed).join(FINAL_CKPT))?)
                };
                apply_strategy(&model, tag, ck.as_ref(), &mut rng)?
            }
        };
        save_checkpoint(&store, &dir.join(INIT_CKPT))?;
        let tc = GeneratorTrainConfig {
            steps: cfg.capped(base.steps),
            seed: seed.wrapping_add(if phase == Phase::Av { 101 } else { 202 }),
            ..base.clone()
        };
        let mut best = store.clone();
        let mut log = open_log(&dir.join("log.jsonl"))?;
        let result = train_generator_tracking_best(&model, &mut store, &set.items(&tr), &set.items(&va), &tc, Some(&mut log), Some(&mut best));
        log.flush()?;
        let summary = match result {
            Ok(s) => s,
            Err(e @ Error::NaNLoss { .. }) => {
                save_checkpoint(&store, &dir.join("nan-dump.ckpt"))?;
                write_json(&dir.join("nan-dump.json"), &e.to_string())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        save_checkpoint(&store, &dir.join(FINAL_CKPT))?;
        if summary.best_val.is_none() {
            best = store.clone();
        }
        save_checkpoint(&best, &dir.join(BEST_CKPT))?;
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(())
    })
}

fn utterance_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Free-running inference for `ids` (every cued-speech utterance when
/// `None`). Lengths come from the gate.
pub fn cmd_generate(layout: &Layout, cfg: &ExperimentConfig, tag: StrategyTag, ids: Option<&[String]>, force: bool) -> Result<()> {
    let ckpt = layout.finetune(cfg.seed, tag).join(FINAL_CKPT);
    let inputs = [ckpt.clone(), layout.corpus(CorpusKind::Cs).join("manifest.jsonl"), layout.features(CorpusKind::Cs)];
    let dir = layout.generated(cfg.seed, tag);
    let stage = format!("generate-{}/seed-{}", tag.as_str(), cfg.seed);
    run_stage(layout, cfg, &stage, &inputs, &[dir.clone()], force, || {
        let cue = cfg.cue()?;
        let model = Generator::new(cfg.generator(&cue)?)?;
        let store: ParamStore<f32> = load_checkpoint(&ckpt)?;
        let set = features(layout, &cue, CorpusKind::Cs)?;
        let split = read_split(layout, CorpusKind::Cs)?;
        let ids: Vec<String> = ids.map_or_else(|| set.ids.clone(), <[String]>::to_vec);
        let k = cfg.recognizer.hand_input;
        let mut records = Vec::with_capacity(ids.len());
        for id in &ids {
            let i = set.index_of(id)?;
            let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(cfg.seed, i));
            let out = model.infer(&store, &set.phonemes[i], &mut rng)?;
            write_frames(&dir.join(format!("{id}.mel")), &out.mel_post, 1)?;
            write_frames(&dir.join(format!("{id}.hand")), &out.hand(k), 1)?;
            write_frames(&dir.join(format!("{id}.lips")), &out.lips(k), 1)?;
            write_frames(&dir.join(format!("{id}.att")), &out.attention, 1)?;
            records.push(GeneratedRecord {
                id: id.clone(),
                split: if split.test.contains(id) { "test" } else { "train" }.into(),
                frames: out.frames(),
                reference_frames: set.bundles[i].frames(),
                truncated: out.truncated,
                diagonality: attention_diagonality(&out.attention).unwrap_or(0.0),
            });
        }
        write_jsonl(&dir.join(GENERATED_INDEX), &records)?;
        Ok(())
    })
}

/// Generated `(hand, lips)` streams of one utterance.
pub fn read_generated(dir: &Path, id: &str) -> Result<(Mat, Mat)> {
    Ok((read_frames(&dir.join(format!("{id}.hand")))?.0, read_frames(&dir.join(format!("{id}.lips")))?.0))
}

fn symbols(cue: &CueConfig, labels: &[usize]) -> Vec<String> {
    labels
        .iter()
        .map(|&l| cue.inventory.phoneme_of_label(l).map_or("?".to_string(), |p| cue.inventory.symbol(p).to_string()))
        .collect()
}

/// Recognizes every item and pools the alignment counts.
pub fn score(
    model: &Recognizer,
    store: &ParamStore<f32>,
    cue: &CueConfig,
    items: &[(String, CtcExample<'_>, bool)],
) -> Result<(crate::metrics::AccuracyReport, Vec<UtteranceScore>)> {
    let mut pairs = Vec::with_capacity(items.len());
    let mut rows = Vec::with_capacity(items.len());
    for (id, it, truncated) in items {
        let hyp = model.recognize(store, it.hand, it.lips)?;
        let r = align_count(it.labels, &hyp)?;
        rows.push(UtteranceScore {
            id: id.clone(),
            reference: symbols(cue, it.labels),
            hypothesis: symbols(cue, &hyp),
            n: r.n,
            d: r.d,
            s: r.s,
            i: r.i,
            truncated: *truncated,
        });
        pairs.push((it.labels.to_vec(), hyp));
    }
    Ok((corpus_accuracy(&pairs)?, rows))
}

/// Scores the cued-speech test items. With `finetune`, the recognizer's
/// output layer is first adapted on the generated training items.
pub fn cmd_evaluate(layout: &Layout, cfg: &ExperimentConfig, source: EvalSource, finetune: bool, force: bool) -> Result<EvalReport> {
    let (gen_dir, out, name) = match source {
        EvalSource::Generated(tag) => (
            Some(layout.generated(cfg.seed, tag)),
            layout.eval(cfg.seed, tag, finetune),
            tag.as_str(),
        ),
        EvalSource::Oracle => {
            if finetune {
                return Err(Error::Config("last-layer fine-tuning applies to generated features only".into()));
            }
            (None, layout.seed_dir(cfg.seed).join("eval").join("oracle.json"), "oracle")
        }
    };
    let mut inputs = vec![layout.acsr().join(ACSR_CKPT), layout.corpus(CorpusKind::Cs).join("split.json"), layout.features(CorpusKind::Cs)];
    inputs.extend(gen_dir.clone());
    let stage = format!("evaluate-{name}{}/seed-{}", if finetune { "-ft" } else { "" }, cfg.seed);
    run_stage(layout, cfg, &stage, &inputs, &[out.clone()], force, || {
        let cue = cfg.cue()?;
        let (model, mut store) = load_recognizer(layout, cfg)?;
        let set = features(layout, &cue, CorpusKind::Cs)?;
        let split = read_split(layout, CorpusKind::Cs)?;
        let labels: Vec<Vec<usize>> = set.phonemes.iter().map(|p| cue.inventory.labels(p)).collect();
        let mut streams: BTreeMap<String, (Mat, Mat, bool)> = BTreeMap::new();
        if let Some(dir) = &gen_dir {
            let records: Vec<GeneratedRecord> = read_jsonl(&dir.join(GENERATED_INDEX))?;
            for r in records {
                let (h, l) = read_generated(dir, &r.id)?;
                streams.insert(r.id, (h, l, r.truncated));
            }
        } else {
            for id in &split.test {
                let b = &set.bundles[set.index_of(id)?];
                streams.insert(id.clone(), (b.hand.clone(), b.lips.clone(), false));
            }
        }
        let item = |id: &String| -> Result<(String, CtcExample<'_>, bool)> {
            let (h, l, t) = streams.get(id).ok_or_else(|| Error::MissingArtifact(PathBuf::from(id)))?;
            Ok((
                id.clone(),
                CtcExample {
                    hand: h,
                    lips: l,
                    labels: &labels[set.index_of(id)?],
                },
                *t,
            ))
        };
        if finetune {
            // Items too short for their label cannot carry a CTC gradient.
            let held_in: Vec<CtcExample<'_>> = split
                .train
                .iter()
                .map(|id| item(id).map(|x| x.1))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|it| ctc_required_frames(it.labels) <= it.hand.rows)
                .collect();
            let tc = RecognizerTrainConfig {
                steps: cfg.capped(cfg.acsr_finetune.steps),
                seed: cfg.seed,
                ..cfg.acsr_finetune.clone()
            };
            if !held_in.is_empty() {
                store = finetune_last_layer(&model, &store, &held_in, &tc)?.0;
            }
        }
        let scored: Vec<_> = split.test.iter().map(item).collect::<Result<_>>()?;
        let (acc, utterances) = score(&model, &store, &cue, &scored)?;
        let report = EvalReport {
            source: name.into(),
            seed: cfg.seed,
            finetune_last_layer: finetune,
            config_hash: cfg.hash(),
            n: acc.n,
            d: acc.d,
            s: acc.s,
            i: acc.i,
            acc: acc.acc,
            truncated: utterances.iter().filter(|u| u.truncated).count(),
            utterances,
        };
        write_json(&out, &report)?;
        Ok(report)
    })
}

/// Landmark overlays along the DTW path between generated and reference
/// coefficients, plus the attention heatmap, for `ids` (the test split
/// when `None`).
pub fn cmd_plot(layout: &Layout, cfg: &ExperimentConfig, tag: StrategyTag, ids: Option<&[String]>, force: bool) -> Result<()> {
    let gen_dir = layout.generated(cfg.seed, tag);
    let inputs = [gen_dir.clone(), layout.features(CorpusKind::Cs), layout.pca()];
    let dir = layout.plots(cfg.seed, tag);
    let stage = format!("plot-{}/seed-{}", tag.as_str(), cfg.seed);
    run_stage(layout, cfg, &stage, &inputs, &[dir.clone()], force, || {
        let cue = cfg.cue()?;
        let set = features(layout, &cue, CorpusKind::Cs)?;
        let (ph, pl) = load_pcas(layout)?;
        let ids: Vec<String> = match ids {
            Some(v) => v.to_vec(),
            None => read_split(layout, CorpusKind::Cs)?.test,
        };
        fs::create_dir_all(&dir)?;
        for id in &ids {
            let b = &set.bundles[set.index_of(id)?];
            let (gh, gl) = read_generated(&gen_dir, id)?;
            let att = read_frames(&gen_dir.join(format!("{id}.att")))?.0;
            let plot = OverlayPlot::new(id, &gh, &gl, &b.hand, &b.lips, &ph, &pl)?;
            fs::write(dir.join(format!("{id}-overlay.svg")), overlay_svg(&plot))?;
            fs::write(dir.join(format!("{id}-attention.svg")), attention_svg(id, &att))?;
        }
        Ok(())
    })
}

/// Median accuracy over seeds for every evaluated source.
pub fn cmd_report(layout: &Layout, cfg: &ExperimentConfig, force: bool) -> Result<ExperimentReport> {
    let runs = layout.root.join("runs");
    run_stage(layout, cfg, "report", &[runs.clone()], &[layout.report()], force, || {
        let mut groups: BTreeMap<(String, bool), BTreeMap<u64, f64>> = BTreeMap::new();
        for f in super::files_under(&[runs.clone()])? {
            let in_eval = f.parent().and_then(Path::file_name).is_some_and(|n| n == "eval");
            if !in_eval || f.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let r: EvalReport = read_json(&f)?;
            groups.entry((r.source, r.finetune_last_layer)).or_default().insert(r.seed, r.acc);
        }
        let rows: Vec<StrategySummary> = groups
            .into_iter()
            .map(|((source, finetune_last_layer), per_seed)| StrategySummary {
                median: median(&per_seed.values().copied().collect::<Vec<_>>()),
                source,
                finetune_last_layer,
                per_seed,
            })
            .collect();
        let report = ExperimentReport { rows };
        write_json(&layout.report().join("report.json"), &report)?;
        fs::write(layout.report().join("report.md"), report_markdown(&report))?;
        Ok(report)
    })
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn report_markdown(r: &ExperimentReport) -> String {
    let mut out = String::from("| source | last-layer fine-tune | per seed | median |\n|---|---|---|---|\n");
    for row in &r.rows {
        let seeds: Vec<String> = row.per_seed.iter().map(|(s, a)| format!("{s}: {:.1}%", 100.0 * a)).collect();
        out.push_str(&format!(
            "| {} | {} | {} | {:.1}% |\n",
            row.source,
            if row.finetune_last_layer { "yes" } else { "no" },
            seeds.join(", "),
            100.0 * row.median
        ));
    }
    out
}

/// Every stage in order: shared data, features and recognizer once, then
/// per seed the pretraining (when a strategy needs it), fine-tuning,
/// generation, both evaluations and plots, then the report.
pub fn run_all(layout: &Layout, cfg: &ExperimentConfig, seeds: &[u64], strategies: &[StrategyTag], force: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    cmd_synth_data(layout, cfg, force)?;
    cmd_fit_pca(layout, cfg, force)?;
    cmd_train_acsr(layout, cfg, force)?;
    for &seed in seeds {
        let c = ExperimentConfig { seed, ..cfg.clone() };
        if strategies.iter().any(|&t| t != StrategyTag::S1Scratch) {
            cmd_train(layout, &c, Phase::Av, force)?;
        }
        for &tag in strategies {
            let c = ExperimentConfig { strategy: tag, ..c.clone() };
            cmd_train(layout, &c, Phase::Cs(tag), force)?;
            cmd_generate(layout, &c, tag, None, force)?;
            cmd_evaluate(layout, &c, EvalSource::Generated(tag), false, force)?;
            cmd_evaluate(layout, &c, EvalSource::Generated(tag), true, force)?;
            cmd_plot(layout, &c, tag, None, force)?;
        }
    }
    cmd_report(layout, cfg, force)
}

/// Max over DTW-matched frame pairs of the landmark distance; zero when the
/// two streams coincide.
pub fn matched_distance(a: &Mat, b: &Mat) -> Result<f64> {
    let path = dtw(a, b)?.path;
    Ok(path
        .iter()
        .map(|&(i, j)| {
            a.row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max))
}
