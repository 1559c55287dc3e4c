use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cuer::{CorpusManifest, CorpusSpec, CuerProfile, RawUtterance, UtteranceRecord};
use crate::domain::{encode_text, CueConfig, TimedPhonemeSeq};
use crate::error::{Error, Result};
use crate::features::{gate_target, FeatureBundle};
use crate::io::{read_audio, read_frames, read_json, read_jsonl, write_audio, write_frames, write_json, write_jsonl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Audiovisual pretraining speaker: audio and lips are used.
    Av,
    /// Cued-speech corpus.
    Cs,
}

impl CorpusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusKind::Av => "av",
            CorpusKind::Cs => "cs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusHeader {
    spec: CorpusSpec,
    profile: CuerProfile,
    sample_rate: u32,
}

/// Seeded shuffle, then the first `round(n * fraction)` ids (at least one,
/// and never all of them) form the test set. Both lists come back sorted.
pub fn split_ids(ids: &[String], fraction: f64, seed: u64) -> Split {
    let n = ids.len();
    let n_test = ((n as f64 * fraction).round() as usize).max(1).min(n.saturating_sub(1));
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = shuffled[..n_test].to_vec();
    let mut train = shuffled[n_test..].to_vec();
    test.sort();
    train.sort();
    Split { train, test }
}

/// `corpus.json` (spec, profile), `manifest.jsonl`, `split.json` and one
/// audio plus two landmark files per utterance.
pub fn write_corpus(dir: &Path, utts: &[RawUtterance], manifest: &CorpusManifest, split: &Split, sample_rate: u32) -> Result<()> {
    write_json(
        &dir.join("corpus.json"),
        &CorpusHeader {
            spec: manifest.spec,
            profile: manifest.profile.clone(),
            sample_rate,
        },
    )?;
    write_jsonl(&dir.join("manifest.jsonl"), &manifest.records)?;
    write_json(&dir.join("split.json"), split)?;
    for (u, r) in utts.iter().zip(&manifest.records) {
        write_audio(&dir.join(&r.audio), &u.audio, sample_rate)?;
        write_frames(&dir.join(&r.hand), &u.hand, 2)?;
        write_frames(&dir.join(&r.lips), &u.lips, 2)?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path, cue: &CueConfig) -> Result<(Vec<RawUtterance>, CorpusManifest, Split)> {
    let header: CorpusHeader = read_json(&dir.join("corpus.json"))?;
    let records: Vec<UtteranceRecord> = read_jsonl(&dir.join("manifest.jsonl"))?;
    let split: Split = read_json(&dir.join("split.json"))?;
    let mut utts = Vec::with_capacity(records.len());
    for r in &records {
        let phonemes = encode_text(&r.symbols, &cue.inventory)?;
        let seq = TimedPhonemeSeq::new(phonemes, r.onsets_ms.clone(), r.durations_ms.clone())?;
        let (audio, rate) = read_audio(&dir.join(&r.audio))?;
        if rate != header.sample_rate {
            return Err(Error::Format {
                path: dir.join(&r.audio),
                reason: format!("sample rate {rate}, corpus declares {}", header.sample_rate),
            });
        }
        let (hand, _) = read_frames(&dir.join(&r.hand))?;
        let (lips, _) = read_frames(&dir.join(&r.lips))?;
        utts.push(RawUtterance {
            id: r.id.clone(),
            seq,
            audio,
            hand,
            lips,
        });
    }
    Ok((
        utts,
        CorpusManifest {
            spec: header.spec,
            profile: header.profile,
            records,
        },
        split,
    ))
}

/// Feature bundles of one corpus with their phoneme ids, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub phonemes: Vec<Vec<usize>>,
    pub bundles: Vec<FeatureBundle>,
}

impl FeatureSet {
    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Config(format!("unknown utterance id {id}")))
    }

    pub fn indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter().map(|id| self.index_of(id)).collect()
    }

    /// `(phoneme ids, bundle)` pairs for the given utterances.
    pub fn items(&self, idx: &[usize]) -> Vec<(&[usize], &FeatureBundle)> {
        idx.iter().map(|&i| (&self.phonemes[i][..], &self.bundles[i])).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (id, b) in self.ids.iter().zip(&self.bundles) {
            write_frames(&dir.join(format!("{id}.mel")), &b.mel, 1)?;
            write_frames(&dir.join(format!("{id}.hand")), &b.hand, 1)?;
            write_frames(&dir.join(format!("{id}.lips")), &b.lips, 1)?;
        }
        Ok(())
    }
}

/// Reads the bundles written for `corpus_dir`'s manifest from `dir`.
pub fn load_features(dir: &Path, corpus_dir: &Path, cue: &CueConfig) -> Result<FeatureSet> {
    let records: Vec<UtteranceRecord> = read_jsonl(&corpus_dir.join("manifest.jsonl"))?;
    let mut set = FeatureSet {
        ids: Vec::new(),
        phonemes: Vec::new(),
        bundles: Vec::new(),
    };
    for r in records {
        let (mel, _) = read_frames(&dir.join(format!("{}.mel", r.id)))?;
        let (hand, _) = read_frames(&dir.join(format!("{}.hand", r.id)))?;
        let (lips, _) = read_frames(&dir.join(format!("{}.lips", r.id)))?;
        if hand.rows != mel.rows || lips.rows != mel.rows {
            return Err(Error::Format {
                path: dir.join(&r.id),
                reason: "streams differ in frame count".into(),
            });
        }
        let gate = gate_target(mel.rows);
        set.phonemes.push(encode_text(&r.symbols, &cue.inventory)?);
        set.ids.push(r.id);
        set.bundles.push(FeatureBundle { mel, hand, lips, gate });
    }
    Ok(set)
}
