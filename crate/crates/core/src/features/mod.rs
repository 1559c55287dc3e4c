//! Mel spectrograms, landmark PCA and frame-synchronous feature bundles.

mod mel;
mod pca;

pub use mel::{
    frame_count, frame_times, hann, hz_to_mel, mel_spectrogram, mel_to_hz, mel_with_bank, stft_energy, MelConfig,
    MelFilterbank, Stft,
};
pub use pca::{pca_fit, PcaModel};

use crate::cuer::RawUtterance;
use crate::error::{Error, Result};
use crate::mat::Mat;

pub const PCA_COMPONENTS: usize = 10;
pub const HAND_DIM: usize = 42;
pub const LIP_DIM: usize = 84;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub mel: Mat,
    pub hand: Mat,
    pub lips: Mat,
    /// 1 on the final frame only.
    pub gate: Vec<f32>,
}

impl FeatureBundle {
    pub fn frames(&self) -> usize {
        self.mel.rows
    }

    /// Hand and lip coefficients side by side, `T x 20`.
    pub fn visual(&self) -> Mat {
        Mat::from_fn(self.hand.rows, self.hand.cols + self.lips.cols, |r, c| {
            if c < self.hand.cols {
                self.hand.at(r, c)
            } else {
                self.lips.at(r, c - self.hand.cols)
            }
        })
    }
}

pub fn gate_target(frames: usize) -> Vec<f32> {
    (0..frames).map(|t| if t + 1 == frames { 1.0 } else { 0.0 }).collect()
}

/// Landmark trajectories already at the mel frame rate are projected as-is;
/// others are linearly resampled to the mel frame count first.
pub fn build_bundle(utt: &RawUtterance, cfg: &MelConfig, pca_hand: &PcaModel, pca_lips: &PcaModel) -> Result<FeatureBundle> {
    let bank = MelFilterbank::new(cfg);
    build_bundle_with_bank(utt, cfg, &bank, pca_hand, pca_lips)
}

pub fn build_bundle_with_bank(
    utt: &RawUtterance,
    cfg: &MelConfig,
    bank: &MelFilterbank,
    pca_hand: &PcaModel,
    pca_lips: &PcaModel,
) -> Result<FeatureBundle> {
    if pca_hand.dim() != HAND_DIM || pca_lips.dim() != LIP_DIM {
        return Err(Error::DimensionMismatch(format!(
            "PCA models must be fitted on {HAND_DIM}-d hand and {LIP_DIM}-d lip frames"
        )));
    }
    let mel = mel_with_bank(&utt.audio, cfg, bank)?;
    let t = mel.rows;
    let hand = pca_hand.transform(&utt.hand.resample_rows(t))?;
    let lips = pca_lips.transform(&utt.lips.resample_rows(t))?;
    Ok(FeatureBundle {
        mel,
        hand,
        lips,
        gate: gate_target(t),
    })
}

/// Fits one PCA per stream on every landmark frame of `utts`.
pub fn fit_stream_pcas(utts: &[&RawUtterance], k: usize) -> Result<(PcaModel, PcaModel)> {
    let hand: Vec<Vec<f64>> = utts.iter().flat_map(|u| u.hand.to_rows_f64()).collect();
    let lips: Vec<Vec<f64>> = utts.iter().flat_map(|u| u.lips.to_rows_f64()).collect();
    Ok((pca_fit(&hand, k)?, pca_fit(&lips, k)?))
}
