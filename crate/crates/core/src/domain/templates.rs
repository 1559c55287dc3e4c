//! Parametric geometry behind the shipped cue configuration. Hand shapes are
//! linear in five finger-extension flags and lip shapes are linear in six
//! articulation parameters, so every template stays in a low-dimensional
//! affine span.

use super::{
    CueCodebook, CueConfig, FormantSpec, PhonemeClass, PhonemeInventory, Point, CONFIG_SCHEMA_VERSION, HAND_POINTS,
    LIP_POINTS,
};

/// Finger extension flags: thumb, index, middle, ring, pinky.
pub type Fingers = [f64; 5];

const WRIST: Point = [0.15, 0.29];
const THUMB_CMC: Point = [0.10, 0.26];
const THUMB_OPEN: [Point; 3] = [[0.07, 0.22], [0.045, 0.19], [0.02, 0.16]];
const THUMB_CLOSED: [Point; 3] = [[0.11, 0.22], [0.13, 0.20], [0.15, 0.19]];
const FINGER_BASE_X: [f64; 4] = [0.10, 0.14, 0.18, 0.22];
const FINGER_BASE_Y: f64 = 0.17;
const SEGMENT: [f64; 4] = [0.035, 0.038, 0.034, 0.028];
const CURLED_Y: [f64; 3] = [0.135, 0.15, 0.175];

/// 21 landmarks in wrist-relative units, ordered wrist, thumb (4), index,
/// middle, ring, pinky (4 each).
pub fn hand_template(f: Fingers) -> Vec<Point> {
    let lerp = |a: Point, b: Point, t: f64| [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
    let mut pts = vec![WRIST, THUMB_CMC];
    for j in 0..3 {
        pts.push(lerp(THUMB_CLOSED[j], THUMB_OPEN[j], f[0]));
    }
    for k in 0..4 {
        let x0 = FINGER_BASE_X[k];
        pts.push([x0, FINGER_BASE_Y]);
        for j in 1..=3 {
            let jf = j as f64;
            let open = [x0 + (x0 - 0.16) * 0.1 * jf, FINGER_BASE_Y - SEGMENT[k] * jf];
            let closed = [x0 + 0.004 * jf, CURLED_Y[j - 1]];
            pts.push(lerp(closed, open, f[k + 1]));
        }
    }
    debug_assert_eq!(pts.len(), HAND_POINTS);
    pts
}

/// Lip articulation: outer half-width, upper and lower outer heights, inner
/// half-width, inner opening and rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipParams {
    pub w: f64,
    pub hu: f64,
    pub hl: f64,
    pub wi: f64,
    pub o: f64,
    pub r: f64,
}

const fn lp(w: f64, hu: f64, hl: f64, wi: f64, o: f64, r: f64) -> LipParams {
    LipParams { w, hu, hl, wi, o, r }
}

pub const NEUTRAL_LIPS: LipParams = lp(0.36, 0.14, 0.16, 0.28, 0.02, 0.0);

/// Per-parameter gain applied to the articulation tables around the neutral pose.
const GAIN: LipParams = lp(1.2, 1.45, 1.45, 1.45, 1.45, 1.0);

fn articulate(p: LipParams) -> LipParams {
    let n = NEUTRAL_LIPS;
    let g = GAIN;
    lp(
        n.w + g.w * (p.w - n.w),
        n.hu + g.hu * (p.hu - n.hu),
        n.hl + g.hl * (p.hl - n.hl),
        n.wi + g.wi * (p.wi - n.wi),
        n.o + g.o * (p.o - n.o),
        n.r + g.r * (p.r - n.r),
    )
}

/// 22 outer contour points followed by 20 inner contour points, in mouth
/// region coordinates (image y grows downwards).
pub fn lip_template(p: LipParams) -> Vec<Point> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(LIP_POINTS);
    for k in 0..22 {
        let th = 2.0 * PI * k as f64 / 22.0;
        let (s, c) = th.sin_cos();
        let h = if s >= 0.0 { p.hu } else { p.hl };
        let bow = if s > 0.0 { 0.02 * (4.0 * th).cos().max(0.0) * s } else { 0.0 };
        pts.push([0.5 + p.w * c - 0.10 * p.r * c, 0.5 - h * s + bow - 0.05 * p.r * s]);
    }
    for k in 0..20 {
        let th = 2.0 * PI * (k as f64 + 0.5) / 20.0;
        let (s, c) = th.sin_cos();
        pts.push([0.5 + p.wi * c - 0.02 * p.r * c, 0.5 + 0.01 - (0.5 * p.o + 0.004) * s]);
    }
    pts
}

struct Entry {
    symbol: &'static str,
    class: PhonemeClass,
    shape: Option<usize>,
    position: Option<usize>,
    lips: LipParams,
    formant: Option<FormantSpec>,
}

fn voiced(level: f64, f: [f64; 3], a: [f64; 3]) -> Option<FormantSpec> {
    Some(FormantSpec {
        voiced: true,
        level,
        peaks: vec![(f[0], a[0]), (f[1], a[1]), (f[2], a[2])],
    })
}

fn unvoiced(peaks: [(f64, f64); 3]) -> Option<FormantSpec> {
    Some(FormantSpec {
        voiced: false,
        level: 0.0,
        peaks: peaks.to_vec(),
    })
}

const SHAPE_FINGERS: [Fingers; 8] = [
    [0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 1.0, 1.0],
    [0.0, 1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0, 0.0, 1.0],
];
const REST_FINGERS: Fingers = [0.0; 5];

/// Side, mouth, chin, throat, cheek.
const POSITION_ANCHORS: [Point; 5] = [[0.55, 0.30], [0.30, 0.25], [0.28, 0.40], [0.30, 0.58], [0.42, 0.12]];
const REST_ANCHOR: Point = [0.60, 0.66];

fn entries() -> Vec<Entry> {
    use PhonemeClass::*;
    const V: [f64; 3] = [1.0, 0.6, 0.3];
    const CV: [f64; 3] = [1.0, 0.4, 0.2];
    let bilabial = lp(0.36, 0.14, 0.15, 0.28, 0.0, 0.0);
    let labiodental = lp(0.37, 0.16, 0.10, 0.29, 0.05, 0.0);
    let alveolar = lp(0.38, 0.16, 0.20, 0.30, 0.12, 0.0);
    let sibilant = lp(0.40, 0.15, 0.18, 0.33, 0.06, 0.0);
    let velar = lp(0.36, 0.17, 0.24, 0.28, 0.18, 0.0);
    let c = |symbol, shape, lips, formant| Entry {
        symbol,
        class: Consonant,
        shape: Some(shape),
        position: None,
        lips,
        formant,
    };
    let v = |symbol, position, lips, f| Entry {
        symbol,
        class: Vowel,
        shape: None,
        position: Some(position),
        lips,
        formant: voiced(0.3, f, V),
    };
    vec![
        v("a", 0, lp(0.40, 0.20, 0.36, 0.32, 0.42, 0.0), [750.0, 1300.0, 2500.0]),
        v("e", 3, lp(0.42, 0.16, 0.24, 0.35, 0.20, 0.0), [400.0, 2000.0, 2550.0]),
        v("i", 1, lp(0.46, 0.13, 0.18, 0.40, 0.10, 0.0), [280.0, 2250.0, 2900.0]),
        c("p", 0, bilabial, unvoiced([(600.0, 0.05), (1200.0, 0.04), (2400.0, 0.03)])),
        v("o", 0, lp(0.27, 0.18, 0.26, 0.17, 0.22, 0.8), [400.0, 800.0, 2400.0]),
        v("u", 2, lp(0.22, 0.15, 0.19, 0.11, 0.08, 1.0), [300.0, 750.0, 2300.0]),
        v("y", 4, lp(0.23, 0.13, 0.17, 0.12, 0.06, 1.0), [280.0, 1800.0, 2200.0]),
        c("t", 4, alveolar, unvoiced([(3500.0, 0.07), (4200.0, 0.06), (5100.0, 0.05)])),
        c("k", 1, velar, unvoiced([(1800.0, 0.07), (2600.0, 0.06), (3300.0, 0.04)])),
        c("b", 3, bilabial, voiced(0.12, [250.0, 900.0, 2200.0], CV)),
        c("d", 0, alveolar, voiced(0.12, [300.0, 1700.0, 2600.0], CV)),
        c("g", 6, velar, voiced(0.12, [300.0, 1900.0, 2400.0], CV)),
        c("m", 4, bilabial, voiced(0.15, [280.0, 1100.0, 2500.0], CV)),
        c("n", 3, alveolar, voiced(0.15, [280.0, 1600.0, 2600.0], CV)),
        c("f", 4, labiodental, unvoiced([(2800.0, 0.04), (4400.0, 0.04), (6300.0, 0.04)])),
        c("s", 2, sibilant, unvoiced([(4800.0, 0.08), (5600.0, 0.07), (6800.0, 0.06)])),
        c("v", 1, labiodental, voiced(0.12, [250.0, 1400.0, 2400.0], CV)),
        c("z", 7, sibilant, voiced(0.12, [250.0, 1600.0, 2600.0], CV)),
        c("l", 5, alveolar, voiced(0.18, [350.0, 1200.0, 2700.0], CV)),
        c("r", 2, velar, voiced(0.16, [450.0, 1300.0, 2300.0], CV)),
        v("E", 2, lp(0.41, 0.18, 0.30, 0.34, 0.30, 0.0), [550.0, 1800.0, 2500.0]),
        v("O", 4, lp(0.31, 0.19, 0.31, 0.21, 0.30, 0.5), [550.0, 900.0, 2400.0]),
        v("2", 3, lp(0.27, 0.15, 0.22, 0.16, 0.14, 0.8), [400.0, 1500.0, 2300.0]),
        v("on", 1, lp(0.29, 0.18, 0.27, 0.18, 0.20, 0.7), [450.0, 850.0, 2400.0]),
        Entry {
            symbol: "_",
            class: Silence,
            shape: None,
            position: None,
            lips: NEUTRAL_LIPS,
            formant: None,
        },
    ]
}

/// Builds the default configuration from the parametric tables above.
pub fn build_default_config() -> CueConfig {
    let entries = entries();
    let inventory = PhonemeInventory::new(entries.iter().map(|e| (e.symbol, e.class))).expect("valid inventory");
    let codebook = CueCodebook {
        handshape_of: entries.iter().map(|e| e.shape).collect(),
        position_of: entries.iter().map(|e| e.position).collect(),
        shape_landmarks: SHAPE_FINGERS.iter().map(|f| hand_template(*f)).collect(),
        position_anchor: POSITION_ANCHORS.to_vec(),
        rest_shape: hand_template(REST_FINGERS),
        rest_anchor: REST_ANCHOR,
        lip_targets: entries
            .iter()
            .map(|e| (e.class != PhonemeClass::Silence).then(|| lip_template(articulate(e.lips))))
            .collect(),
        neutral_lips: lip_template(NEUTRAL_LIPS),
    };
    CueConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        note: "Artifact-defined stand-in table: 25 phonemes, consonants map to 8 hand shapes and vowels to 5 \
               positions (0 side, 1 mouth, 2 chin, 3 throat, 4 cheek). This is not the official LfPC chart. \
               Hand templates are wrist-relative; posed hand = shape + anchor. Lip templates use mouth-region \
               coordinates. Voiced formant peaks are Gaussian resonances (bandwidth 120 Hz) over f0 harmonics \
               scaled to `level`; unvoiced peaks are literal partials."
            .into(),
        inventory,
        codebook,
        formants: entries.into_iter().map(|e| e.formant).collect(),
    }
}
