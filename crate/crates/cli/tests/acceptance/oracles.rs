//! Brute-force reference implementations, written from the documented
//! behaviour rather than from the library code.

use std::f64::consts::PI;

/// Mirror without repeating the edge sample, by explicit bouncing.
pub fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Sum of the lower `F/2` rows and of the rest, per column.
pub fn band_energies(m: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>) {
    let f = m.len();
    let t = m[0].len();
    let mut low = vec![0.0; t];
    let mut high = vec![0.0; t];
    for col in 0..t {
        for (row, r) in m.iter().enumerate() {
            if row < f / 2 {
                low[col] += f64::from(r[col]);
            } else {
                high[col] += f64::from(r[col]);
            }
        }
    }
    (low, high)
}

pub fn ratio(low: &[f64], high: &[f64], eps: f64) -> Vec<f64> {
    low.iter().zip(high).map(|(l, h)| h / (l + eps)).collect()
}

/// Moving average over an explicitly padded copy of the series.
pub fn smooth(x: &[f64], k: usize) -> Vec<f64> {
    let r = k / 2;
    let padded: Vec<f64> = (0..x.len() + 2 * r)
        .map(|p| x[mirror(p as isize - r as isize, x.len())])
        .collect();
    (0..x.len())
        .map(|t| padded[t..t + k].iter().fold(0.0, |a, v| a + v) / k as f64)
        .collect()
}

/// Frames whose sign relative to the mean differs from the previous frame.
pub fn sign_flips(s: &[f64]) -> Vec<usize> {
    let mean = s.iter().fold(0.0, |a, v| a + v) / s.len() as f64;
    let sign: Vec<bool> = s.iter().map(|v| v - mean >= 0.0).collect();
    let mut out = Vec::new();
    for t in 1..s.len() {
        if sign[t] != sign[t - 1] {
            out.push(t);
        }
    }
    out
}

/// Merged windows, computed from a per-frame coverage mask.
pub fn regions(points: &[usize], w: usize, total: usize) -> Vec<[usize; 2]> {
    let mut covered = vec![false; total];
    for &p in points {
        let lo = p.saturating_sub(w / 2);
        let hi = (p + w.div_ceil(2)).min(total);
        covered[lo..hi].iter_mut().for_each(|c| *c = true);
    }
    let mut out = Vec::new();
    let mut t = 0;
    while t < total {
        if covered[t] {
            let s = t;
            while t < total && covered[t] {
                t += 1;
            }
            out.push([s, t]);
        } else {
            t += 1;
        }
    }
    out
}

/// Magnitude of the direct DFT of `x`, bins `0..=N/2`.
pub fn dft_magnitude(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                let ang = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
                re += v * ang.cos();
                im -= v * ang.sin();
            }
            re.hypot(im)
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (PI * i as f64 / n as f64).sin().powi(2))
        .collect()
}

/// Windowed frame `j` of a centered STFT.
pub fn stft_frame(x: &[f64], frame: usize, hop: usize, j: usize, taper: &[f64]) -> Vec<f64> {
    let start = (j * hop) as isize - (frame / 2) as isize;
    (0..frame)
        .map(|i| x[mirror(start + i as isize, x.len())] * taper[i])
        .collect()
}

/// Centers of an HTK-mel filterbank spaced between `fmin` and `fmax`.
pub fn mel_centers(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let to_mel = |hz: f64| 1127.0 * (1.0 + hz / 700.0).ln();
    let to_hz = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
    let (a, b) = (to_mel(fmin), to_mel(fmax));
    (1..=n_mels)
        .map(|i| to_hz(a + (b - a) * i as f64 / (n_mels + 1) as f64))
        .collect()
}
