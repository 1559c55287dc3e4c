//! Synthetic cuer: renders timed phoneme sequences into audio and
//! frame-synchronous hand and lip landmark trajectories.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{cue_targets, CueConfig, CueTarget, LipTemplate, PhonemeClass, TimedPhonemeSeq};
use crate::error::{Error, Result};
use crate::features::{frame_count, frame_times, MelConfig};
use crate::mat::Mat;

pub const SAMPLE_RATE: u32 = 22_050;
pub const CROSSFADE_MS: f64 = 10.0;
pub const RESONANCE_BANDWIDTH_HZ: f64 = 120.0;
pub const MAX_HARMONIC_HZ: f64 = 5000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuerProfile {
    pub hand_lead_ms: f64,
    pub transition_ms: f64,
    pub landmark_noise_std: f64,
    /// Per phoneme id, the `(frequency Hz, amplitude)` partials of its segment.
    pub formant_table: Vec<Vec<(f64, f64)>>,
    pub f0_hz: f64,
}

impl CuerProfile {
    /// Default timing and noise with the partials of `config` rendered at `f0_hz`.
    pub fn from_config(config: &CueConfig, f0_hz: f64) -> Self {
        let formant_table = config
            .formants
            .iter()
            .map(|spec| match spec {
                None => Vec::new(),
                Some(s) if !s.voiced => s.peaks.clone(),
                Some(s) => {
                    let n = (MAX_HARMONIC_HZ / f0_hz).floor() as usize;
                    let mut partials: Vec<(f64, f64)> = (1..=n)
                        .map(|h| {
                            let f = h as f64 * f0_hz;
                            let a: f64 = s
                                .peaks
                                .iter()
                                .map(|(fc, a)| a * (-(f - fc).powi(2) / (2.0 * RESONANCE_BANDWIDTH_HZ.powi(2))).exp())
                                .sum();
                            (f, a)
                        })
                        .collect();
                    let norm = partials.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        partials.iter_mut().for_each(|p| p.1 *= s.level / norm);
                    }
                    partials.retain(|p| p.1 > 1e-4 * s.level);
                    partials
                }
            })
            .collect();
        Self {
            hand_lead_ms: 100.0,
            transition_ms: 60.0,
            landmark_noise_std: 0.005,
            formant_table,
            f0_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=120.0).contains(&self.hand_lead_ms) {
            return Err(Error::Config(format!("hand_lead_ms {} outside [0, 120]", self.hand_lead_ms)));
        }
        if !(self.transition_ms > 0.0) {
            return Err(Error::Config("transition_ms must be positive".into()));
        }
        if !(self.landmark_noise_std >= 0.0) {
            return Err(Error::Config("landmark_noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawUtterance {
    pub id: String,
    pub seq: TimedPhonemeSeq,
    pub audio: Vec<f32>,
    /// `T x 42`: 21 points, `x, y` interleaved.
    pub hand: Mat,
    /// `T x 84`: 42 points, `x, y` interleaved.
    pub lips: Mat,
}

fn fade_weight(i: usize, n: usize, t: f64, on: f64, off: f64, h: f64) -> f64 {
    let mut w = 1.0;
    if i > 0 && t < on + h {
        w *= if t <= on - h {
            0.0
        } else {
            0.5 * (1.0 - (PI * (t - (on - h)) / (2.0 * h)).cos())
        };
    }
    if i + 1 < n && t > off - h {
        w *= if t >= off + h {
            0.0
        } else {
            0.5 * (1.0 + (PI * (t - (off - h)) / (2.0 * h)).cos())
        };
    }
    w
}

/// Each segment is the sum of its partials; adjacent segments overlap in a
/// raised-cosine cross-fade centred on their boundary.
pub fn synth_audio(seq: &TimedPhonemeSeq, profile: &CuerProfile) -> Result<Vec<f32>> {
    if seq.is_empty() {
        return Err(Error::EmptyInput);
    }
    seq.validate()?;
    let sr = SAMPLE_RATE as f64;
    let n_samples = (seq.total_ms() * sr / 1000.0).floor() as usize;
    let mut out = vec![0.0f64; n_samples];
    let h = CROSSFADE_MS / 2000.0;
    let n = seq.len();
    for i in 0..n {
        let partials = profile
            .formant_table
            .get(seq.phonemes[i])
            .ok_or(Error::MissingCodebookEntry(seq.phonemes[i]))?;
        if partials.is_empty() {
            continue;
        }
        let on = seq.onsets_ms[i] / 1000.0;
        let off = on + seq.durations_ms[i] / 1000.0;
        let lo = if i == 0 { 0.0 } else { on - h };
        let hi = if i + 1 == n { f64::INFINITY } else { off + h };
        let first = ((lo * sr).ceil().max(0.0)) as usize;
        let last = ((hi * sr).floor().min(n_samples as f64 - 1.0)) as usize;
        for (k, o) in out.iter_mut().enumerate().take(last + 1).skip(first) {
            let t = k as f64 / sr;
            let w = fade_weight(i, n, t, on, off, h);
            if w == 0.0 {
                continue;
            }
            let s: f64 = partials.iter().map(|(f, a)| a * (2.0 * PI * f * t).sin()).sum();
            *o += w * s;
        }
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Quintic minimum-jerk profile on `[0, 1]`.
pub fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Piecewise trajectory through `targets`, starting from `start`; movement `i`
/// runs over `[windows[i].0, windows[i].1]`. Windows must not overlap.
fn piecewise(start: &[f64], targets: &[Vec<f64>], windows: &[(f64, f64)], t: f64) -> Vec<f64> {
    let i = match windows.iter().rposition(|w| w.0 <= t) {
        None => return start.to_vec(),
        Some(i) => i,
    };
    let (s, e) = windows[i];
    let to = &targets[i];
    if t >= e {
        return to.clone();
    }
    let from = if i == 0 { start } else { &targets[i - 1] };
    let a = min_jerk((t - s) / (e - s));
    from.iter().zip(to).map(|(f, g)| f + a * (g - f)).collect()
}

/// Landmark windows of the hand and lip movements toward each phoneme.
pub fn gesture_windows(seq: &TimedPhonemeSeq, profile: &CuerProfile) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let hand = seq
        .onsets_ms
        .iter()
        .map(|on| {
            let s = (on - profile.hand_lead_ms) / 1000.0;
            (s, s + profile.transition_ms / 1000.0)
        })
        .collect();
    let lips = seq
        .onsets_ms
        .iter()
        .zip(&seq.durations_ms)
        .map(|(on, d)| (on / 1000.0, (on + d / 2.0) / 1000.0))
        .collect();
    (hand, lips)
}

pub fn synth_gestures(
    seq: &TimedPhonemeSeq,
    config: &CueConfig,
    profile: &CuerProfile,
    frame_times: &[f64],
    rng_seed: u64,
) -> Result<(Mat, Mat)> {
    if frame_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidTiming("frame times must be sorted".into()));
    }
    let cb = &config.codebook;
    let targets = cue_targets(seq, cb, &config.inventory)?;
    let hand_targets: Vec<Vec<f64>> = targets.iter().map(|t| cb.hand_pose(t)).collect();
    let lip_targets: Vec<Vec<f64>> = targets.iter().map(|t| cb.lip_pose(t)).collect();
    let hand_rest = cb.hand_pose(&CueTarget::REST);
    let lip_rest = cb.lip_pose(&CueTarget {
        lips: LipTemplate::Neutral,
        ..CueTarget::REST
    });
    let (hw, lw) = gesture_windows(seq, profile);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = Normal::new(0.0, profile.landmark_noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise std: {e}")))?;
    let mut render = |rest: &[f64], goals: &[Vec<f64>], windows: &[(f64, f64)]| {
        let cols = rest.len();
        let mut data = Vec::with_capacity(frame_times.len() * cols);
        for &t in frame_times {
            for v in piecewise(rest, goals, windows, t) {
                let v = if profile.landmark_noise_std > 0.0 {
                    v + noise.sample(&mut rng)
                } else {
                    v
                };
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        Mat {
            rows: frame_times.len(),
            cols,
            data,
        }
    };
    let hand = render(&hand_rest, &hand_targets, &hw);
    let lips = render(&lip_rest, &lip_targets, &lw);
    Ok((hand, lips))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_utterances: usize,
    pub length_range: (usize, usize),
    pub duration_range_ms: (u32, u32),
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub symbols: Vec<String>,
    pub onsets_ms: Vec<f64>,
    pub durations_ms: Vec<f64>,
    pub audio: String,
    pub hand: String,
    pub lips: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub profile: CuerProfile,
    pub records: Vec<UtteranceRecord>,
}

pub fn utterance_id(index: usize) -> String {
    format!("utt{index:05}")
}

fn pick<R: Rng>(rng: &mut R, pool: &[usize], avoid: Option<usize>) -> usize {
    loop {
        let p = pool[rng.random_range(0..pool.len())];
        if Some(p) != avoid || pool.len() == 1 {
            return p;
        }
    }
}

/// Body of CV syllables with occasional isolated consonants, no phoneme
/// immediately repeated; sequences of three or more phonemes are framed by
/// silence.
pub fn sample_phonemes<R: Rng>(rng: &mut R, len: usize, config: &CueConfig) -> Vec<usize> {
    let inv = &config.inventory;
    let cons = inv.ids_of_class(PhonemeClass::Consonant);
    let vows = inv.ids_of_class(PhonemeClass::Vowel);
    let framed = len >= 3;
    let body_len = if framed { len - 2 } else { len };
    let mut body: Vec<usize> = Vec::with_capacity(len);
    while body.len() < body_len {
        let remaining = body_len - body.len();
        let prev = body.last().copied();
        let isolated = rng.random_bool(0.2);
        if remaining >= 2 && !isolated {
            let c = pick(rng, &cons, prev);
            body.push(c);
            body.push(pick(rng, &vows, Some(c)));
        } else if isolated {
            body.push(pick(rng, &cons, prev));
        } else {
            body.push(pick(rng, &vows, prev));
        }
    }
    if framed {
        let sil = inv.silence_id();
        let mut out = vec![sil];
        out.extend(body);
        out.push(sil);
        out
    } else {
        body
    }
}

pub fn render_utterance(
    id: String,
    seq: TimedPhonemeSeq,
    config: &CueConfig,
    profile: &CuerProfile,
    mel: &MelConfig,
    noise_seed: u64,
) -> Result<RawUtterance> {
    let audio = synth_audio(&seq, profile)?;
    let frames = frame_count(audio.len(), mel)?;
    let (hand, lips) = synth_gestures(&seq, config, profile, &frame_times(frames, mel), noise_seed)?;
    Ok(RawUtterance {
        id,
        seq,
        audio,
        hand,
        lips,
    })
}

/// Renders one utterance from the stream `(seed, index)`, independently of
/// every other index.
pub fn generate_utterance(index: usize, spec: &CorpusSpec, profile: &CuerProfile, config: &CueConfig) -> Result<RawUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (lmin, lmax) = spec.length_range;
    let len = rng.random_range(lmin..=lmax);
    let phonemes = sample_phonemes(&mut rng, len, config);
    let (dmin, dmax) = spec.duration_range_ms;
    let durations: Vec<f64> = phonemes.iter().map(|_| rng.random_range(dmin..=dmax) as f64).collect();
    let noise_seed = rng.random::<u64>();
    let seq = TimedPhonemeSeq::from_durations(phonemes, durations)?;
    render_utterance(utterance_id(index), seq, config, profile, &MelConfig::default(), noise_seed)
}

pub fn validate_spec(spec: &CorpusSpec, profile: &CuerProfile) -> Result<()> {
    profile.validate()?;
    let (lmin, lmax) = spec.length_range;
    let (dmin, dmax) = spec.duration_range_ms;
    if spec.n_utterances == 0 || lmin == 0 || lmin > lmax || dmin == 0 || dmin > dmax {
        return Err(Error::Config(format!("invalid corpus spec {spec:?}")));
    }
    if profile.transition_ms >= dmin as f64 {
        return Err(Error::Config("transition_ms must be shorter than every phoneme".into()));
    }
    let win_ms = MelConfig::default().win as f64 * 1000.0 / SAMPLE_RATE as f64;
    if (lmin * dmin as usize) as f64 <= win_ms {
        return Err(Error::Config("shortest possible utterance is shorter than one analysis window".into()));
    }
    Ok(())
}

pub fn relative_paths(id: &str) -> (String, String, String) {
    (
        format!("audio/{id}.f32"),
        format!("hand/{id}.lmk"),
        format!("lips/{id}.lmk"),
    )
}

pub fn generate_corpus(spec: &CorpusSpec, profile: &CuerProfile, config: &CueConfig) -> Result<(Vec<RawUtterance>, CorpusManifest)> {
    validate_spec(spec, profile)?;
    let utterances = (0..spec.n_utterances)
        .map(|i| generate_utterance(i, spec, profile, config))
        .collect::<Result<Vec<_>>>()?;
    let records = utterances
        .iter()
        .map(|u| {
            let (audio, hand, lips) = relative_paths(&u.id);
            UtteranceRecord {
                id: u.id.clone(),
                symbols: u
                    .seq
                    .phonemes
                    .iter()
                    .map(|&p| config.inventory.symbol(p).to_string())
                    .collect(),
                onsets_ms: u.seq.onsets_ms.clone(),
                durations_ms: u.seq.durations_ms.clone(),
                audio,
                hand,
                lips,
            }
        })
        .collect();
    Ok((
        utterances,
        CorpusManifest {
            spec: *spec,
            profile: profile.clone(),
            records,
        },
    ))
}
