//! Phoneme inventory, cue codebook and timed phoneme sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod templates;

pub const HAND_POINTS: usize = 21;
pub const LIP_POINTS: usize = 42;
pub const NUM_SHAPES: usize = 8;
pub const NUM_POSITIONS: usize = 5;
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhonemeClass {
    Consonant,
    Vowel,
    Silence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phoneme {
    pub id: usize,
    pub symbol: String,
    pub class: PhonemeClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<PhonemeEntry>", into = "Vec<PhonemeEntry>")]
pub struct PhonemeInventory {
    phonemes: Vec<Phoneme>,
    by_symbol: HashMap<String, usize>,
    silence: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhonemeEntry {
    pub symbol: String,
    pub class: PhonemeClass,
}

impl PartialEq for PhonemeInventory {
    fn eq(&self, other: &Self) -> bool {
        self.phonemes == other.phonemes
    }
}

impl TryFrom<Vec<PhonemeEntry>> for PhonemeInventory {
    type Error = Error;

    fn try_from(entries: Vec<PhonemeEntry>) -> Result<Self> {
        Self::new(entries.into_iter().map(|e| (e.symbol, e.class)))
    }
}

impl From<PhonemeInventory> for Vec<PhonemeEntry> {
    fn from(inv: PhonemeInventory) -> Self {
        inv.phonemes
            .into_iter()
            .map(|p| PhonemeEntry {
                symbol: p.symbol,
                class: p.class,
            })
            .collect()
    }
}

impl PhonemeInventory {
    /// Ids are assigned densely in the given order.
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, PhonemeClass)>) -> Result<Self> {
        let mut phonemes = Vec::new();
        let mut by_symbol = HashMap::new();
        for (id, (symbol, class)) in entries.into_iter().enumerate() {
            let symbol = symbol.into();
            if by_symbol.insert(symbol.clone(), id).is_some() {
                return Err(Error::InvalidCodebook(format!("duplicate phoneme symbol {symbol:?}")));
            }
            phonemes.push(Phoneme { id, symbol, class });
        }
        let silences: Vec<usize> = phonemes
            .iter()
            .filter(|p| p.class == PhonemeClass::Silence)
            .map(|p| p.id)
            .collect();
        if silences.len() != 1 {
            return Err(Error::InvalidCodebook(format!(
                "inventory needs exactly one silence phoneme, found {}",
                silences.len()
            )));
        }
        Ok(Self {
            phonemes,
            by_symbol,
            silence: silences[0],
        })
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Phoneme> {
        self.phonemes.get(id)
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.by_symbol.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.phonemes[id].symbol
    }

    pub fn class(&self, id: usize) -> PhonemeClass {
        self.phonemes[id].class
    }

    pub fn silence_id(&self) -> usize {
        self.silence
    }

    pub fn phonemes(&self) -> &[Phoneme] {
        &self.phonemes
    }

    pub fn ids_of_class(&self, class: PhonemeClass) -> Vec<usize> {
        self.phonemes.iter().filter(|p| p.class == class).map(|p| p.id).collect()
    }

    /// Number of recognizer label classes (every phoneme except silence).
    pub fn num_labels(&self) -> usize {
        self.len() - 1
    }

    /// Recognizer class of a non-silence phoneme; 0 is reserved for the CTC blank.
    pub fn label_of(&self, id: usize) -> Option<usize> {
        if id == self.silence || id >= self.len() {
            None
        } else if id < self.silence {
            Some(id + 1)
        } else {
            Some(id)
        }
    }

    pub fn phoneme_of_label(&self, label: usize) -> Option<usize> {
        if label == 0 || label > self.num_labels() {
            None
        } else if label - 1 < self.silence {
            Some(label - 1)
        } else {
            Some(label)
        }
    }

    /// Recognizer targets for a phoneme id sequence: silence dropped.
    pub fn labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().filter_map(|&id| self.label_of(id)).collect()
    }
}

pub fn encode_text<S: AsRef<str>>(symbols: &[S], inventory: &PhonemeInventory) -> Result<Vec<usize>> {
    symbols
        .iter()
        .map(|s| {
            inventory
                .id_of(s.as_ref())
                .ok_or_else(|| Error::UnknownSymbol(s.as_ref().to_string()))
        })
        .collect()
}

pub fn decode_ids(ids: &[usize], inventory: &PhonemeInventory) -> Result<Vec<String>> {
    ids.iter()
        .map(|&id| {
            inventory
                .get(id)
                .map(|p| p.symbol.clone())
                .ok_or_else(|| Error::UnknownSymbol(format!("#{id}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedPhonemeSeq {
    pub phonemes: Vec<usize>,
    pub onsets_ms: Vec<f64>,
    pub durations_ms: Vec<f64>,
}

impl TimedPhonemeSeq {
    /// Contiguous segmentation starting at 0 ms.
    pub fn from_durations(phonemes: Vec<usize>, durations_ms: Vec<f64>) -> Result<Self> {
        let mut onsets = Vec::with_capacity(durations_ms.len());
        let mut t = 0.0;
        for d in &durations_ms {
            onsets.push(t);
            t += d;
        }
        Self::new(phonemes, onsets, durations_ms)
    }

    pub fn new(phonemes: Vec<usize>, onsets_ms: Vec<f64>, durations_ms: Vec<f64>) -> Result<Self> {
        let s = Self {
            phonemes,
            onsets_ms,
            durations_ms,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.phonemes.len();
        if self.onsets_ms.len() != n || self.durations_ms.len() != n {
            return Err(Error::InvalidTiming("phoneme, onset and duration counts differ".into()));
        }
        for i in 0..n {
            if !(self.durations_ms[i] > 0.0) {
                return Err(Error::InvalidTiming(format!("duration {i} is not positive")));
            }
            if i + 1 < n {
                let next = self.onsets_ms[i] + self.durations_ms[i];
                if (self.onsets_ms[i + 1] - next).abs() > 1e-9 * next.abs().max(1.0) {
                    return Err(Error::InvalidTiming(format!("segment {} is not contiguous", i + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn total_ms(&self) -> f64 {
        match self.phonemes.len() {
            0 => 0.0,
            n => self.onsets_ms[n - 1] + self.durations_ms[n - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LipTemplate {
    Neutral,
    Phoneme(usize),
}

/// One expanded cue: `None` marks the rest shape or rest position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueTarget {
    pub shape: Option<usize>,
    pub position: Option<usize>,
    pub lips: LipTemplate,
}

impl CueTarget {
    pub const REST: CueTarget = CueTarget {
        shape: None,
        position: None,
        lips: LipTemplate::Neutral,
    };
}

/// Hand shapes, hand positions and lip templates. Maps are indexed by
/// phoneme id; entries are `None` for phonemes outside the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueCodebook {
    pub handshape_of: Vec<Option<usize>>,
    pub position_of: Vec<Option<usize>>,
    /// Hand landmarks relative to the wrist anchor.
    pub shape_landmarks: Vec<Vec<Point>>,
    pub position_anchor: Vec<Point>,
    pub rest_shape: Vec<Point>,
    pub rest_anchor: Point,
    pub lip_targets: Vec<Option<Vec<Point>>>,
    pub neutral_lips: Vec<Point>,
}

fn in_unit_box(points: &[Point]) -> bool {
    points
        .iter()
        .all(|p| p.iter().all(|v| (0.0..=1.0).contains(v)))
}

impl CueCodebook {
    pub fn validate(&self, inventory: &PhonemeInventory) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCodebook(m));
        let v = inventory.len();
        if self.handshape_of.len() != v || self.position_of.len() != v || self.lip_targets.len() != v {
            return bad("codebook tables must have one entry per phoneme".into());
        }
        if self.shape_landmarks.len() != NUM_SHAPES || self.position_anchor.len() != NUM_POSITIONS {
            return bad(format!("expected {NUM_SHAPES} shapes and {NUM_POSITIONS} positions"));
        }
        for p in inventory.phonemes() {
            let (s, q) = (self.handshape_of[p.id], self.position_of[p.id]);
            let ok = match p.class {
                PhonemeClass::Consonant => matches!(s, Some(i) if i < NUM_SHAPES) && q.is_none(),
                PhonemeClass::Vowel => matches!(q, Some(i) if i < NUM_POSITIONS) && s.is_none(),
                PhonemeClass::Silence => s.is_none() && q.is_none(),
            };
            if !ok {
                return bad(format!("bad shape/position entry for {:?}", p.symbol));
            }
            match (&self.lip_targets[p.id], p.class) {
                (None, PhonemeClass::Silence) => {}
                (Some(t), c) if c != PhonemeClass::Silence => {
                    if t.len() != LIP_POINTS || !in_unit_box(t) {
                        return bad(format!("lip template of {:?} is malformed", p.symbol));
                    }
                }
                _ => return bad(format!("lip template presence wrong for {:?}", p.symbol)),
            }
        }
        let mut all_shapes: Vec<&Vec<Point>> = self.shape_landmarks.iter().collect();
        all_shapes.push(&self.rest_shape);
        let mut anchors = self.position_anchor.clone();
        anchors.push(self.rest_anchor);
        for shape in &all_shapes {
            if shape.len() != HAND_POINTS || !in_unit_box(shape) {
                return bad("hand shape template malformed".into());
            }
            for a in &anchors {
                let posed: Vec<Point> = shape.iter().map(|p| [p[0] + a[0], p[1] + a[1]]).collect();
                if !in_unit_box(&posed) {
                    return bad("a posed hand leaves the unit square".into());
                }
            }
        }
        if self.neutral_lips.len() != LIP_POINTS || !in_unit_box(&self.neutral_lips) {
            return bad("neutral lip template malformed".into());
        }
        Ok(())
    }

    pub fn shape(&self, shape: Option<usize>) -> &[Point] {
        match shape {
            Some(s) => &self.shape_landmarks[s],
            None => &self.rest_shape,
        }
    }

    pub fn anchor(&self, position: Option<usize>) -> Point {
        match position {
            Some(p) => self.position_anchor[p],
            None => self.rest_anchor,
        }
    }

    /// Shape template translated to the position anchor, flattened `x0,y0,x1,...`.
    pub fn hand_pose(&self, target: &CueTarget) -> Vec<f64> {
        let a = self.anchor(target.position);
        self.shape(target.shape)
            .iter()
            .flat_map(|p| [p[0] + a[0], p[1] + a[1]])
            .collect()
    }

    pub fn lip_pose(&self, target: &CueTarget) -> Vec<f64> {
        let t = match target.lips {
            LipTemplate::Neutral => &self.neutral_lips,
            LipTemplate::Phoneme(id) => self.lip_targets[id].as_ref().unwrap_or(&self.neutral_lips),
        };
        t.iter().flat_map(|p| [p[0], p[1]]).collect()
    }
}

/// Expands a timed sequence into per-phoneme cue targets. A consonant keeps
/// the previous position, a vowel keeps the previous shape; silence returns
/// to the rest pose and resets both.
pub fn cue_targets(seq: &TimedPhonemeSeq, codebook: &CueCodebook, inventory: &PhonemeInventory) -> Result<Vec<CueTarget>> {
    let mut shape = None;
    let mut position = None;
    let mut out = Vec::with_capacity(seq.len());
    for &id in &seq.phonemes {
        let class = inventory.get(id).ok_or(Error::MissingCodebookEntry(id))?.class;
        let missing = || Error::MissingCodebookEntry(id);
        let t = match class {
            PhonemeClass::Silence => {
                shape = None;
                position = None;
                CueTarget::REST
            }
            PhonemeClass::Consonant => {
                shape = Some(codebook.handshape_of.get(id).copied().flatten().ok_or_else(missing)?);
                codebook.lip_targets.get(id).and_then(|t| t.as_ref()).ok_or_else(missing)?;
                CueTarget {
                    shape,
                    position,
                    lips: LipTemplate::Phoneme(id),
                }
            }
            PhonemeClass::Vowel => {
                position = Some(codebook.position_of.get(id).copied().flatten().ok_or_else(missing)?);
                codebook.lip_targets.get(id).and_then(|t| t.as_ref()).ok_or_else(missing)?;
                CueTarget {
                    shape,
                    position,
                    lips: LipTemplate::Phoneme(id),
                }
            }
        };
        out.push(t);
    }
    Ok(out)
}

/// Resonance description of one phoneme. Voiced sounds are rendered as f0
/// harmonics weighted by Gaussian resonances; unvoiced sounds use the listed
/// partials as fixed sinusoids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormantSpec {
    pub voiced: bool,
    /// Peak amplitude of a voiced segment; unused for unvoiced ones.
    pub level: f64,
    /// `(frequency Hz, amplitude)` pairs.
    pub peaks: Vec<(f64, f64)>,
}

/// The on-disk cue configuration: inventory, codebook and voice table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueConfig {
    pub schema_version: u32,
    pub note: String,
    pub inventory: PhonemeInventory,
    pub codebook: CueCodebook,
    pub formants: Vec<Option<FormantSpec>>,
}

const DEFAULT_CONFIG: &str = include_str!("../../assets/default_cues.json");

impl CueConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(Error::InvalidCodebook(format!("unsupported schema_version {v}"))),
            None => return Err(Error::InvalidCodebook("schema_version is missing".into())),
        }
        let cfg: CueConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.codebook.validate(&self.inventory)?;
        if self.formants.len() != self.inventory.len() {
            return Err(Error::InvalidCodebook("formant table needs one entry per phoneme".into()));
        }
        for p in self.inventory.phonemes() {
            if (p.class == PhonemeClass::Silence) != self.formants[p.id].is_none() {
                return Err(Error::InvalidCodebook(format!("formant entry presence wrong for {:?}", p.symbol)));
            }
        }
        Ok(())
    }

    /// The shipped default configuration.
    pub fn default_config() -> Self {
        Self::from_json(DEFAULT_CONFIG).expect("shipped cue configuration is valid")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
