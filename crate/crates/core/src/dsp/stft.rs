use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{reflect_index, AudioBuffer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    /// Periodic Hann taper.
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|n| {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()
                })
                .collect(),
        }
    }
}

/// Number of frames produced for `len` samples: `1 + ceil(len / hop)`.
pub fn stft_frame_count(len: usize, hop: usize) -> usize {
    1 + len.div_ceil(hop)
}

/// Magnitude STFT with centered frames.
///
/// Frame `j` starts at padded position `j * hop`; padded position `p` reads
/// sample `p - frame / 2`, mirrored back into range when it falls outside
/// the signal. Output is `(frame / 2 + 1) x stft_frame_count(len, hop)`.
pub fn stft_magnitude(
    audio: &AudioBuffer,
    frame: usize,
    hop: usize,
    window: Window,
) -> Result<Array2<f64>> {
    if hop == 0 || frame < hop {
        return Err(Error::param(format!(
            "need frame >= hop >= 1, got frame={frame} hop={hop}"
        )));
    }
    if audio.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let x = audio.samples();
    let n = x.len();
    let n_bins = frame / 2 + 1;
    let n_frames = stft_frame_count(n, hop);
    let taper = window.coefficients(frame);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame);

    let mut out = Array2::<f64>::zeros((n_bins, n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); frame];
    let half = (frame / 2) as isize;
    for j in 0..n_frames {
        let start = (j * hop) as isize - half;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = x[reflect_index(start + i as isize, n)];
            *slot = Complex::new(s * taper[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[[k, j]] = buf[k].norm();
        }
    }
    Ok(out)
}
