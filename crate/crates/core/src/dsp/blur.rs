use std::ops::Range;

use ndarray::Array2;

use super::{reflect_index, MelSpectrogram};
use crate::error::{Error, Result};

/// Normalized, symmetric 1D Gaussian taps.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    taps: Vec<f64>,
    sigma: f64,
}

impl GaussianKernel {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn size(&self) -> usize {
        self.taps.len()
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<GaussianKernel> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::param(format!(
            "kernel size must be odd and positive, got {size}"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    let c = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(GaussianKernel { taps, sigma })
}

/// Separable Gaussian blur (time axis, then frequency axis) restricted to the
/// columns in `frames`.
///
/// The selected block is filtered as if it were a standalone matrix: samples
/// beyond its edges are mirrored back into it, so no column outside `frames`
/// is read or written.
pub fn gaussian_blur_2d(
    mel: &MelSpectrogram,
    kernel: &GaussianKernel,
    frames: Range<usize>,
) -> Result<MelSpectrogram> {
    let (n_f, n_t) = mel.data().dim();
    if frames.start >= frames.end || frames.end > n_t {
        return Err(Error::param(format!(
            "frame range {}..{} invalid for {} frames",
            frames.start, frames.end, n_t
        )));
    }
    let width = frames.end - frames.start;
    let taps = kernel.taps();
    let r = kernel.radius() as isize;
    let src = mel.data();

    let mut along_time = Array2::<f64>::zeros((n_f, width));
    for f in 0..n_f {
        for j in 0..width {
            let mut acc = 0.0;
            for (i, &w) in taps.iter().enumerate() {
                let k = reflect_index(j as isize + i as isize - r, width);
                acc += w * f64::from(src[[f, frames.start + k]]);
            }
            along_time[[f, j]] = acc;
        }
    }

    let mut out = src.clone();
    for j in 0..width {
        for f in 0..n_f {
            let mut acc = 0.0;
            for (i, &w) in taps.iter().enumerate() {
                let k = reflect_index(f as isize + i as isize - r, n_f);
                acc += w * along_time[[k, j]];
            }
            out[[f, frames.start + j]] = acc as f32;
        }
    }
    MelSpectrogram::new(out, mel.hop(), mel.is_log())
}
