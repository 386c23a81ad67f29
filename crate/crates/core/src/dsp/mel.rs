use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{stft_magnitude, AudioBuffer, Window};
use crate::error::{Error, Result};

pub const DEFAULT_LOG_FLOOR: f64 = 1e-5;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `F x T` matrix of mel-band energies, frequency-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    data: Array2<f32>,
    hop: u32,
    is_log: bool,
}

impl MelSpectrogram {
    pub fn new(data: Array2<f32>, hop: u32, is_log: bool) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::shape("F >= 1 and T >= 1", data.dim()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("spectrogram contains non-finite values"));
        }
        if !is_log && data.iter().any(|&v| v < 0.0) {
            return Err(Error::param("linear spectrogram contains negative values"));
        }
        Ok(Self { data, hop, is_log })
    }

    /// Builds from double-precision values, rounding to the stored precision.
    pub fn from_f64(data: &Array2<f64>, hop: u32, is_log: bool) -> Result<Self> {
        Self::new(data.mapv(|v| v as f32), hop, is_log)
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn n_mels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn hop(&self) -> u32 {
        self.hop
    }

    pub fn is_log(&self) -> bool {
        self.is_log
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    center_freqs: Vec<f64>,
}

impl MelFilterbank {
    /// `n_mels x n_bins`.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn center_freqs(&self) -> &[f64] {
        &self.center_freqs
    }

    pub fn n_mels(&self) -> usize {
        self.center_freqs.len()
    }

    /// Index of the band whose center frequency is closest to `hz`.
    pub fn nearest_band(&self, hz: f64) -> usize {
        nearest(&self.center_freqs, hz)
    }
}

pub(crate) fn nearest(centers: &[f64], hz: f64) -> usize {
    let mut best = 0;
    for (i, c) in centers.iter().enumerate() {
        if (c - hz).abs() < (centers[best] - hz).abs() {
            best = i;
        }
    }
    best
}

/// Triangular filters with HTK-mel-spaced centers between `fmin` and `fmax`.
///
/// A filter narrower than the FFT bin spacing can miss every bin; such a
/// filter gets unit weight on the bin nearest its center so that every band
/// still receives energy.
pub fn mel_filterbank(
    sample_rate: u32,
    n_fft_bins: usize,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(Error::param(format!(
            "need 0 <= fmin < fmax <= {nyquist}, got fmin={fmin} fmax={fmax}"
        )));
    }
    if n_mels < 2 {
        return Err(Error::param("n_mels must be at least 2"));
    }
    if n_fft_bins < 2 {
        return Err(Error::param("need at least 2 FFT bins"));
    }
    let n_fft = 2 * (n_fft_bins - 1);
    let bin_hz: Vec<f64> = (0..n_fft_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();

    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut weights = Array2::<f64>::zeros((n_mels, n_fft_bins));
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut any = false;
        for (k, &f) in bin_hz.iter().enumerate() {
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            if w > 0.0 {
                weights[[m, k]] = w;
                any = true;
            }
        }
        if !any {
            weights[[m, nearest(&bin_hz, c)]] = 1.0;
        }
    }

    Ok(MelFilterbank {
        weights,
        center_freqs: edges[1..=n_mels].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub frame: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Defaults to Nyquist when absent.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            frame: 512,
            hop: 128,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl MelConfig {
    pub fn filterbank(&self, sample_rate: u32) -> Result<MelFilterbank> {
        let fmax = self.fmax.unwrap_or(sample_rate as f64 / 2.0);
        mel_filterbank(sample_rate, self.frame / 2 + 1, self.n_mels, self.fmin, fmax)
    }
}

/// Linear-magnitude mel spectrogram (Hann-windowed STFT projected onto the filterbank).
pub fn mel_spectrogram(audio: &AudioBuffer, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let hop = u32::try_from(cfg.hop).map_err(|_| Error::param("hop too large"))?;
    let bank = cfg.filterbank(audio.sample_rate())?;
    let mag = stft_magnitude(audio, cfg.frame, cfg.hop, Window::Hann)?;
    let mel = bank.weights().dot(&mag);
    MelSpectrogram::from_f64(&mel, hop, false)
}

/// Natural log of `max(entry, floor)`.
pub fn log_compress(mel: &MelSpectrogram, floor: f64) -> Result<MelSpectrogram> {
    if mel.is_log() {
        return Err(Error::AlreadyLog);
    }
    if !(floor > 0.0) {
        return Err(Error::param("log floor must be positive"));
    }
    let data = mel.data().mapv(|v| (f64::from(v).max(floor)).ln() as f32);
    MelSpectrogram::new(data, mel.hop(), true)
}
