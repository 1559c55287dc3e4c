//! Experiment orchestration: configuration, on-disk layout, run manifest and
//! the stage commands.
//!
//! Corpora, PCA models, feature bundles and the recognizer live at the
//! output root and depend only on `data_seed`. Everything downstream of
//! the pretrained generator lives under `runs/seed-<seed>/`.

mod corpus;
mod plot;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use corpus::{load_corpus, load_features, split_ids, write_corpus, CorpusKind, FeatureSet, Split};
pub use plot::{attention_svg, overlay_svg, OverlayPlot};
pub use stages::{
    load_pcas, load_recognizer, matched_distance, median, read_generated, score, EvalSource, ACSR_CKPT, BEST_CKPT, FINAL_CKPT, GENERATED_INDEX, INIT_CKPT,
    cmd_evaluate, cmd_fit_pca, cmd_generate, cmd_plot, cmd_report, cmd_synth_data, cmd_train, cmd_train_acsr, run_all,
    EvalReport, ExperimentReport, GeneratedRecord, Phase, StrategySummary, UtteranceScore,
};

use crate::domain::CueConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorPreset, GeneratorTrainConfig, LossWeights, StrategyTag};
use crate::io::{file_hash, read_json, sha256_hex, write_json};
use crate::nn::AdamConfig;
use crate::recognizer::{RecognizerConfig, RecognizerTrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "CUEDGEN_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Generator initialization, shuffling and decoding noise.
    pub seed: u64,
    /// Corpora, splits and the recognizer.
    pub data_seed: u64,
    pub av_pretrain_n: usize,
    pub cs_train_n: usize,
    pub cs_test_fraction: f64,
    pub length_range: (usize, usize),
    pub duration_range_ms: (u32, u32),
    pub av_f0_hz: f64,
    pub cs_f0_hz: f64,
    pub landmark_noise_std: f64,
    /// Inventory and codebook JSON; the shipped table when absent.
    pub cue_config: Option<PathBuf>,
    pub generator_preset: GeneratorPreset,
    pub strategy: StrategyTag,
    /// Audio and lips pretraining. The `seed` field is replaced by the
    /// experiment seed.
    pub pretrain: GeneratorTrainConfig,
    /// Fine-tuning on the cued-speech corpus; `seed` is replaced as above.
    pub finetune: GeneratorTrainConfig,
    pub recognizer: RecognizerConfig,
    pub recognizer_train: RecognizerTrainConfig,
    /// Last-layer adaptation of the recognizer to generated features.
    pub acsr_finetune: RecognizerTrainConfig,
    /// Cap on the steps of every training phase.
    pub max_steps: usize,
    /// Not part of the config hash.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let labels = CueConfig::default_config().inventory.num_labels();
        Self {
            seed: 1,
            data_seed: 0,
            av_pretrain_n: 300,
            cs_train_n: 30,
            cs_test_fraction: 0.1,
            length_range: (5, 8),
            duration_range_ms: (70, 130),
            av_f0_hz: 120.0,
            cs_f0_hz: 120.0,
            landmark_noise_std: 0.005,
            cue_config: None,
            generator_preset: GeneratorPreset::Desk,
            strategy: StrategyTag::S3FrozenEncoder,
            pretrain: GeneratorTrainConfig {
                steps: 2000,
                loss_weights: LossWeights::av_pretrain(),
                log_every: 50,
                val_every: 500,
                ..Default::default()
            },
            finetune: GeneratorTrainConfig {
                steps: 1000,
                log_every: 50,
                val_every: 250,
                ..Default::default()
            },
            recognizer: RecognizerConfig::desk(labels),
            recognizer_train: RecognizerTrainConfig {
                steps: 1200,
                val_every: 300,
                ..Default::default()
            },
            acsr_finetune: RecognizerTrainConfig {
                steps: 200,
                adam: AdamConfig {
                    lr: 1e-3,
                    ..Default::default()
                },
                log_every: 0,
                ..Default::default()
            },
            max_steps: 3000,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        // A file that exists but does not parse is a bad config, not an I/O failure.
        let cfg: Self = read_json(path).map_err(|e| match e {
            Error::Format { .. } => Error::Config(e.to_string()),
            e => e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cs_test_fraction > 0.0 && self.cs_test_fraction < 1.0) {
            return Err(Error::Config(format!("cs_test_fraction {} outside (0, 1)", self.cs_test_fraction)));
        }
        if self.av_pretrain_n < 2 || self.cs_train_n < 2 {
            return Err(Error::Config("each corpus needs at least two utterances for a train/test split".into()));
        }
        if self.length_range.0 == 0 || self.length_range.0 > self.length_range.1 {
            return Err(Error::Config(format!("bad length_range {:?}", self.length_range)));
        }
        if self.duration_range_ms.0 == 0 || self.duration_range_ms.0 > self.duration_range_ms.1 {
            return Err(Error::Config(format!("bad duration_range_ms {:?}", self.duration_range_ms)));
        }
        if !(self.av_f0_hz > 0.0 && self.cs_f0_hz > 0.0) || !(self.landmark_noise_std >= 0.0) {
            return Err(Error::Config("f0 must be positive and landmark noise non-negative".into()));
        }
        let cue = self.cue()?;
        let classes = cue.inventory.num_labels() + 1;
        if self.recognizer.classes != classes {
            return Err(Error::Config(format!(
                "recognizer has {} classes, the inventory needs {classes}",
                self.recognizer.classes
            )));
        }
        self.recognizer.validate()?;
        self.generator(&cue)?.validate()?;
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if t.batch_size == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be positive")));
            }
        }
        Ok(())
    }

    pub fn cue(&self) -> Result<CueConfig> {
        match &self.cue_config {
            Some(p) => CueConfig::load(p),
            None => Ok(CueConfig::default_config()),
        }
    }

    pub fn generator(&self, cue: &CueConfig) -> Result<GeneratorConfig> {
        let cfg = GeneratorConfig::preset(self.generator_preset, cue.inventory.len());
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON with `output_dir` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub(crate) fn capped(&self, steps: usize) -> usize {
        steps.min(self.max_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub config_hash: String,
    /// Relative path to SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// Relative path to SHA-256 of every file the stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub elapsed_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// The configuration of the latest stage, all defaults materialized.
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub generator: GeneratorConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Paths of every artifact below an output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `--out`, then the config's `output_dir`, then the environment.
    pub fn resolve(cli: Option<&Path>, cfg: &ExperimentConfig) -> Result<Self> {
        if let Some(p) = cli {
            return Ok(Self::new(p));
        }
        if let Some(p) = &cfg.output_dir {
            return Ok(Self::new(p));
        }
        match std::env::var_os(OUTPUT_ENV) {
            Some(p) => Ok(Self::new(p)),
            None => Err(Error::Config(format!("no output directory: pass --out or set {OUTPUT_ENV}"))),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
    pub fn corpus(&self, kind: CorpusKind) -> PathBuf {
        self.root.join("data").join(kind.as_str())
    }
    pub fn pca(&self) -> PathBuf {
        self.root.join("pca")
    }
    pub fn features(&self, kind: CorpusKind) -> PathBuf {
        self.root.join("features").join(kind.as_str())
    }
    pub fn acsr(&self) -> PathBuf {
        self.root.join("acsr")
    }
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("seed-{seed}"))
    }
    pub fn pretrain(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("train").join("av")
    }
    pub fn finetune(&self, seed: u64, tag: StrategyTag) -> PathBuf {
        self.seed_dir(seed).join("train").join(format!("cs-{}", tag.as_str()))
    }
    pub fn generated(&self, seed: u64, tag: StrategyTag) -> PathBuf {
        self.seed_dir(seed).join("generated").join(tag.as_str())
    }
    pub fn eval(&self, seed: u64, tag: StrategyTag, finetune: bool) -> PathBuf {
        let name = if finetune { format!("{}-ft.json", tag.as_str()) } else { format!("{}.json", tag.as_str()) };
        self.seed_dir(seed).join("eval").join(name)
    }
    pub fn plots(&self, seed: u64, tag: StrategyTag) -> PathBuf {
        self.seed_dir(seed).join("plots").join(tag.as_str())
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    pub fn read_manifest(&self) -> Result<Option<RunManifest>> {
        let p = self.manifest();
        if !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }
}

fn list_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            list_files(&e, out)?;
        }
    } else if p.exists() {
        out.push(p.to_path_buf());
    }
    Ok(())
}

/// Every file below each of `paths`, sorted.
pub fn files_under(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        list_files(p, &mut out)?;
    }
    Ok(out)
}

/// Runs one stage: refuses existing outputs unless `force` (which deletes
/// them first), then records input and output hashes in the manifest.
pub(crate) fn run_stage<T>(
    layout: &Layout,
    cfg: &ExperimentConfig,
    name: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    force: bool,
    body: impl FnOnce() -> Result<T>,
) -> Result<T> {
    for o in outputs {
        if o.exists() {
            if !force {
                return Err(Error::OutputExists(o.clone()));
            }
            if o.is_dir() {
                fs::remove_dir_all(o)?;
            } else {
                fs::remove_file(o)?;
            }
        }
    }
    for p in inputs {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let mut input_hashes = BTreeMap::new();
    for f in files_under(inputs)? {
        input_hashes.insert(layout.relative(&f), file_hash(&f)?);
    }
    fs::create_dir_all(&layout.root)?;
    let start = Instant::now();
    let result = body();
    let mut output_hashes = BTreeMap::new();
    for f in files_under(outputs)? {
        output_hashes.insert(layout.relative(&f), file_hash(&f)?);
    }
    let cue = cfg.cue()?;
    let mut manifest = layout.read_manifest()?.unwrap_or(RunManifest {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        generator: cfg.generator(&cue)?,
        stages: BTreeMap::new(),
    });
    manifest.config = cfg.clone();
    manifest.config_hash = cfg.hash();
    manifest.generator = cfg.generator(&cue)?;
    manifest.stages.insert(
        name.to_string(),
        StageRecord {
            status: if result.is_ok() { StageStatus::Done } else { StageStatus::Failed },
            config_hash: cfg.hash(),
            inputs: input_hashes,
            outputs: output_hashes,
            elapsed_s: start.elapsed().as_secs_f64(),
            error: result.as_ref().err().map(|e| e.to_string()),
        },
    );
    write_json(&layout.manifest(), &manifest)?;
    result
}

#[cfg(test)]
mod tests;
