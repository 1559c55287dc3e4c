use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22_050,
            n_fft: 1024,
            win: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hop >= 1
            && self.hop <= self.win
            && self.win == self.n_fft
            && self.n_mels >= 1
            && self.fmin >= 0.0
            && self.fmin < self.fmax
            && self.fmax <= self.sample_rate as f64 / 2.0
            && self.log_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mel configuration {self:?}")))
        }
    }
}

/// `floor((n - win) / hop) + 1`; no centre padding.
pub fn frame_count(n_samples: usize, cfg: &MelConfig) -> Result<usize> {
    if n_samples < cfg.win {
        return Err(Error::TooShort {
            got: n_samples,
            need: cfg.win,
        });
    }
    Ok((n_samples - cfg.win) / cfg.hop + 1)
}

/// Time in seconds of the centre of each analysis window.
pub fn frame_times(frames: usize, cfg: &MelConfig) -> Vec<f64> {
    (0..frames)
        .map(|i| (i * cfg.hop) as f64 / cfg.sample_rate as f64 + cfg.win as f64 / (2.0 * cfg.sample_rate as f64))
        .collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Triangular filters with unit peak on the mel scale; rows are bands, columns
/// are the `n_fft / 2 + 1` frequency bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub centers_hz: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.n_fft / 2 + 1;
        let (m0, m1) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m0 + (m1 - m0) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let weights = (0..cfg.n_mels)
            .map(|b| {
                let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self {
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
            weights,
        }
    }
}

/// Frame-by-frame magnitude spectra of the Hann-windowed signal.
pub struct Stft {
    cfg: MelConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &MelConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg: *cfg,
            window: hann(cfg.win),
            fft: planner.plan_fft_forward(cfg.n_fft),
        }
    }

    pub fn magnitudes(&self, audio: &[f32]) -> Result<Vec<Vec<f64>>> {
        let frames = frame_count(audio.len(), &self.cfg)?;
        let n_bins = self.cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(audio[start + i] as f64 * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            out.push(buf[..n_bins].iter().map(|c| c.norm()).collect());
        }
        Ok(out)
    }
}

/// Sum of squared STFT magnitudes over every frame and bin.
pub fn stft_energy(audio: &[f32], cfg: &MelConfig) -> Result<f64> {
    let mags = Stft::new(cfg).magnitudes(audio)?;
    Ok(mags.iter().flatten().map(|m| m * m).sum())
}

/// Log-mel spectrogram, `frames x n_mels`.
pub fn mel_spectrogram(audio: &[f32], cfg: &MelConfig) -> Result<Mat> {
    let bank = MelFilterbank::new(cfg);
    mel_with_bank(audio, cfg, &bank)
}

pub fn mel_with_bank(audio: &[f32], cfg: &MelConfig, bank: &MelFilterbank) -> Result<Mat> {
    let mags = Stft::new(cfg).magnitudes(audio)?;
    let mut out = Mat::zeros(mags.len(), cfg.n_mels);
    for (t, frame) in mags.iter().enumerate() {
        for (b, w) in bank.weights.iter().enumerate() {
            let e: f64 = w.iter().zip(frame).map(|(w, m)| w * m).sum();
            out.data[t * cfg.n_mels + b] = e.max(cfg.log_floor).ln() as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_count_examples() {
        let c = MelConfig::default();
        assert_eq!(frame_count(1024, &c).unwrap(), 1);
        assert_eq!(frame_count(22_050, &c).unwrap(), 83);
        assert_eq!(frame_count(4_410, &c).unwrap(), 14);
        assert!(matches!(frame_count(1023, &c), Err(Error::TooShort { got: 1023, need: 1024 })));
    }

    #[test]
    fn zero_audio_hits_floor() {
        let c = MelConfig::default();
        let m = mel_spectrogram(&vec![0.0; 5000], &c).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!(m.data.iter().all(|&v| v == floor));
        assert_eq!((m.rows, m.cols), (16, 80));
    }

    fn sine(freq: f64, amp: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / 22_050.0).sin()) as f32)
            .collect()
    }

    #[test]
    fn sine_peaks_in_nearest_band() {
        let c = MelConfig::default();
        let bank = MelFilterbank::new(&c);
        let nearest = bank
            .centers_hz
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        let m = mel_spectrogram(&sine(440.0, 1.0, 22_050), &c).unwrap();
        for t in 0..m.rows {
            let row = m.row(t);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn doubling_amplitude_adds_ln2() {
        let c = MelConfig::default();
        let a = sine(1000.0, 0.3, 4000);
        let b: Vec<f32> = a.iter().map(|v| v * 2.0).collect();
        let ma = mel_spectrogram(&a, &c).unwrap();
        let mb = mel_spectrogram(&b, &c).unwrap();
        let floor = (1e-5f64).ln() as f32;
        let mut checked = 0;
        for (x, y) in ma.data.iter().zip(&mb.data) {
            if *x > floor + 1.0 {
                assert!((y - x - std::f32::consts::LN_2).abs() < 1e-4);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn filterbank_bands_nonempty_and_sorted() {
        let bank = MelFilterbank::new(&MelConfig::default());
        assert!(bank.weights.iter().all(|w| w.iter().any(|&v| v > 0.0)));
        assert!(bank.centers_hz.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn white_noise_energy_is_linear_in_length() {
        let c = MelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise: Vec<f32> = (0..60_000).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let lens: Vec<usize> = (1..=10).map(|k| 1024 + 5000 * k).collect();
        let xs: Vec<f64> = lens.iter().map(|&n| n as f64).collect();
        let ys: Vec<f64> = lens.iter().map(|&n| stft_energy(&noise[..n], &c).unwrap()).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let r2 = sxy * sxy / (sxx * syy);
        assert!(r2 > 0.99, "R^2 = {r2}");
    }

    #[test]
    fn frame_times_are_window_centres() {
        let c = MelConfig::default();
        let t = frame_times(3, &c);
        assert!((t[0] - 512.0 / 22_050.0).abs() < 1e-15);
        assert!((t[2] - 1024.0 / 22_050.0).abs() < 1e-15);
    }
}
