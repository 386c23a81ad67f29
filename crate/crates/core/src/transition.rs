//! Pitch-transition detection on mel spectrograms.
//!
//! The frequency axis is split into a low and a high half; the per-frame ratio
//! of high-band to low-band energy is smoothed with a uniform kernel, and a
//! transition point is declared wherever the smoothed ratio crosses its own
//! mean. A fixed-size window around each point marks a transition region.
//! Regions drive both the reference blur and the loss weighting.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{gaussian_blur_2d, gaussian_kernel, reflect_index, GaussianKernel, MelSpectrogram};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisParams {
    /// Uniform smoothing kernel size (odd).
    pub k: usize,
    /// Region window size around each transition point.
    pub w: usize,
    pub eps: f64,
    /// Loss weight inside regions.
    pub lambda: f64,
    pub blur_size: usize,
    pub blur_sigma: f64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            k: 9,
            w: 8,
            eps: 1e-6,
            lambda: 2.0,
            blur_size: 5,
            blur_sigma: 1.0,
        }
    }
}

impl AnalysisParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::param(format!("k must be odd, got {}", self.k)));
        }
        if self.w == 0 {
            return Err(Error::param("w must be at least 1"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps must be positive"));
        }
        if !(self.lambda >= 1.0) {
            return Err(Error::param(format!("lambda must be >= 1, got {}", self.lambda)));
        }
        self.kernel().map(|_| ())
    }

    pub fn kernel(&self) -> Result<GaussianKernel> {
        gaussian_kernel(self.blur_size, self.blur_sigma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRatioSeries {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub mean: f64,
    pub kernel_size: usize,
}

impl EnergyRatioSeries {
    pub fn from_raw(raw: Vec<f64>, k: usize) -> Result<Self> {
        let smoothed = smooth_ratio(&raw, k)?;
        let mean = smoothed.iter().sum::<f64>() / smoothed.len() as f64;
        Ok(Self {
            raw,
            smoothed,
            mean,
            kernel_size: k,
        })
    }
}

/// Sorted, disjoint frame intervals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionRegionSet {
    regions: Vec<Range<usize>>,
    window: usize,
    total_frames: usize,
}

impl TransitionRegionSet {
    pub fn empty(window: usize, total_frames: usize) -> Self {
        Self {
            regions: Vec::new(),
            window,
            total_frames,
        }
    }

    /// Sorts and merges overlapping or touching intervals.
    pub fn from_intervals(
        mut intervals: Vec<Range<usize>>,
        window: usize,
        total_frames: usize,
    ) -> Result<Self> {
        for r in &intervals {
            if r.start >= r.end || r.end > total_frames {
                return Err(Error::param(format!(
                    "interval {}..{} invalid for {total_frames} frames",
                    r.start, r.end
                )));
            }
        }
        intervals.sort_by_key(|r| (r.start, r.end));
        let mut merged: Vec<Range<usize>> = Vec::with_capacity(intervals.len());
        for r in intervals {
            match merged.last_mut() {
                Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
                _ => merged.push(r),
            }
        }
        Ok(Self {
            regions: merged,
            window,
            total_frames,
        })
    }

    pub fn regions(&self) -> &[Range<usize>] {
        &self.regions
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.regions.iter().any(|r| r.contains(&frame))
    }

    /// Per-frame membership.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total_frames];
        for r in &self.regions {
            m[r.clone()].iter_mut().for_each(|v| *v = true);
        }
        m
    }

    pub fn covered_frames(&self) -> usize {
        self.regions.iter().map(|r| r.len()).sum()
    }

    pub fn as_pairs(&self) -> Vec<[usize; 2]> {
        self.regions.iter().map(|r| [r.start, r.end]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    data: Array2<f64>,
    lambda_in: f64,
}

impl WeightMap {
    pub fn uniform(n_mels: usize, n_frames: usize) -> Self {
        Self {
            data: Array2::ones((n_mels, n_frames)),
            lambda_in: 1.0,
        }
    }

    /// Arbitrary positive weights, mainly for tests and external callers.
    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::param("weights must be positive and finite"));
        }
        let lambda_in = data.iter().cloned().fold(1.0, f64::max);
        Ok(Self { data, lambda_in })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn lambda_in(&self) -> f64 {
        self.lambda_in
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// Per-frame energy of the lower `floor(F/2)` bands and of the remaining bands.
pub fn band_energies(mel: &MelSpectrogram) -> Result<(Vec<f64>, Vec<f64>)> {
    if mel.is_log() {
        return Err(Error::LogInput);
    }
    let (n_f, n_t) = mel.data().dim();
    if n_f < 2 {
        return Err(Error::param("band split needs at least 2 mel bands"));
    }
    let split = n_f / 2;
    let data = mel.data();
    let mut low = vec![0.0; n_t];
    let mut high = vec![0.0; n_t];
    for t in 0..n_t {
        for f in 0..n_f {
            let v = f64::from(data[[f, t]]);
            if f < split {
                low[t] += v;
            } else {
                high[t] += v;
            }
        }
    }
    Ok((low, high))
}

/// `high / (low + eps)` per frame.
pub fn energy_ratio(low: &[f64], high: &[f64], eps: f64) -> Result<Vec<f64>> {
    if low.len() != high.len() {
        return Err(Error::shape(low.len(), high.len()));
    }
    Ok(low
        .iter()
        .zip(high)
        .map(|(&l, &h)| h / (l + eps))
        .collect())
}

/// Centered moving average of odd width `k` with mirrored boundaries.
pub fn smooth_ratio(ratio: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = ratio.len();
    if k == 0 || k % 2 == 0 {
        return Err(Error::param(format!("smoothing kernel must be odd, got {k}")));
    }
    if n == 0 || k > 2 * n - 1 {
        return Err(Error::param(format!(
            "smoothing kernel {k} too wide for {n} frames"
        )));
    }
    let r = (k / 2) as isize;
    Ok((0..n as isize)
        .map(|t| {
            let mut acc = 0.0;
            for i in -r..=r {
                acc += ratio[reflect_index(t + i, n)];
            }
            acc / k as f64
        })
        .collect())
}

/// Frames where the sign of `smoothed - mean` flips; zero counts as positive.
pub fn detect_transition_points(series: &EnergyRatioSeries) -> Result<Vec<usize>> {
    let s = &series.smoothed;
    if s.len() < 2 {
        return Err(Error::param("transition detection needs at least 2 frames"));
    }
    let positive = |v: f64| v - series.mean >= 0.0;
    Ok((1..s.len())
        .filter(|&t| positive(s[t]) != positive(s[t - 1]))
        .collect())
}

/// Window `[t - floor(w/2), t + ceil(w/2))` around each point, clamped and merged.
pub fn build_regions(
    points: &[usize],
    w: usize,
    total_frames: usize,
) -> Result<TransitionRegionSet> {
    if w == 0 {
        return Err(Error::param("window must be at least 1"));
    }
    if points.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::param("transition points must be sorted"));
    }
    if let Some(&p) = points.iter().find(|&&p| p >= total_frames) {
        return Err(Error::param(format!(
            "transition point {p} outside {total_frames} frames"
        )));
    }
    let (before, after) = (w / 2, w.div_ceil(2));
    let intervals = points
        .iter()
        .map(|&t| t.saturating_sub(before)..(t + after).min(total_frames))
        .collect();
    TransitionRegionSet::from_intervals(intervals, w, total_frames)
}

pub fn blur_regions(
    mel: &MelSpectrogram,
    regions: &TransitionRegionSet,
    kernel: &GaussianKernel,
) -> Result<MelSpectrogram> {
    if regions.total_frames() != mel.n_frames() {
        return Err(Error::shape(mel.n_frames(), regions.total_frames()));
    }
    let mut out = mel.clone();
    for r in regions.regions() {
        out = gaussian_blur_2d(&out, kernel, r.clone())?;
    }
    Ok(out)
}

pub fn weight_map(regions: &TransitionRegionSet, n_mels: usize, lambda_in: f64) -> Result<WeightMap> {
    if !(lambda_in >= 1.0) {
        return Err(Error::param(format!("lambda must be >= 1, got {lambda_in}")));
    }
    let mut data = Array2::ones((n_mels, regions.total_frames()));
    for r in regions.regions() {
        data.slice_mut(ndarray::s![.., r.clone()]).fill(lambda_in);
    }
    Ok(WeightMap { data, lambda_in })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub series: EnergyRatioSeries,
    pub points: Vec<usize>,
    pub regions: TransitionRegionSet,
}

pub fn analyze(mel: &MelSpectrogram, params: &AnalysisParams) -> Result<Analysis> {
    params.validate()?;
    let (low, high) = band_energies(mel)?;
    let raw = energy_ratio(&low, &high, params.eps)?;
    let series = EnergyRatioSeries::from_raw(raw, params.k)?;
    let points = detect_transition_points(&series)?;
    let regions = build_regions(&points, params.w, mel.n_frames())?;
    Ok(Analysis {
        series,
        points,
        regions,
    })
}

/// Fraction of `boundaries` that have a region within `tolerance` frames.
pub fn boundary_recall(regions: &TransitionRegionSet, boundaries: &[usize], tolerance: usize) -> f64 {
    if boundaries.is_empty() {
        return 1.0;
    }
    let hit = boundaries
        .iter()
        .filter(|&&b| {
            let lo = b.saturating_sub(tolerance);
            let hi = b + tolerance;
            regions.regions().iter().any(|r| r.start <= hi && r.end > lo)
        })
        .count();
    hit as f64 / boundaries.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    pub k: usize,
    pub w: usize,
    pub eps: f64,
    pub lambda: f64,
}

/// JSON region report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub total_frames: usize,
    pub hop: u32,
    pub points: Vec<usize>,
    pub regions: Vec<[usize; 2]>,
    pub params: ReportParams,
}

impl RegionReport {
    pub fn new(analysis: &Analysis, hop: u32, params: &AnalysisParams) -> Self {
        Self {
            total_frames: analysis.regions.total_frames(),
            hop,
            points: analysis.points.clone(),
            regions: analysis.regions.as_pairs(),
            params: ReportParams {
                k: params.k,
                w: params.w,
                eps: params.eps,
                lambda: params.lambda,
            },
        }
    }

    pub fn region_set(&self) -> Result<TransitionRegionSet> {
        TransitionRegionSet::from_intervals(
            self.regions.iter().map(|&[s, e]| s..e).collect(),
            self.params.w,
            self.total_frames,
        )
    }
}
