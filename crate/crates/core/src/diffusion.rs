//! DDPM machinery: variance schedule, forward noising, ancestral reverse
//! steps, the full sampler and the weighted noise-prediction loss.
//!
//! Time steps are 1-based throughout: `t = 1` is the first noising step and
//! `t = T` produces the (nearly) white end of the chain.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::transition::WeightMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default = "linear_kind")]
    pub kind: ScheduleKind,
}

fn linear_kind() -> ScheduleKind {
    ScheduleKind::Linear
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.06,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::param(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// Linear beta ramp from `beta_min` (t = 1) to `beta_max` (t = T).
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::param("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::param(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    Ok(())
}

/// Closed-form draw from q(x_t | x_0) given the noise.
pub fn q_sample(
    x0: &Array2<f64>,
    t: usize,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    same_shape(x0, noise)?;
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(noise).map_collect(|&x, &e| a * x + b * e))
}

/// One Markov noising step from x_{t-1} to x_t.
pub fn q_step(
    x_prev: &Array2<f64>,
    t: usize,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    same_shape(x_prev, noise)?;
    schedule.check_step(t)?;
    let beta = schedule.beta(t);
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    Ok(Zip::from(x_prev).and(noise).map_collect(|&x, &e| a * x + b * e))
}

/// Mean of p(x_{t-1} | x_t) under the noise-prediction parameterization.
pub fn reverse_mean(
    x_t: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    same_shape(x_t, eps_hat)?;
    schedule.check_step(t)?;
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let scale = 1.0 / schedule.alpha(t).sqrt();
    Ok(Zip::from(x_t)
        .and(eps_hat)
        .map_collect(|&x, &e| scale * (x - coef * e)))
}

/// Ancestral step `x_{t-1} = mean + sqrt(beta_t) z`. At `t = 1` the noise is dropped.
pub fn p_step(
    x_t: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    z: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    same_shape(x_t, z)?;
    let mut mean = reverse_mean(x_t, t, eps_hat, schedule)?;
    if t > 1 {
        let sigma = schedule.beta(t).sqrt();
        mean.zip_mut_with(z, |m, &zz| *m += sigma * zz);
    }
    Ok(mean)
}

/// Conditioning for one spectrogram: per-frame score features and the
/// (already blurred, normalized) reference spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// `D x T`.
    pub cond: Array2<f64>,
    /// `F x T`, in the diffusion data domain.
    pub ref_mel: Array2<f64>,
}

impl ConditionBundle {
    pub fn new(cond: Array2<f64>, ref_mel: Array2<f64>) -> Result<Self> {
        if cond.ncols() != ref_mel.ncols() {
            return Err(Error::shape(
                format!("{} condition frames", ref_mel.ncols()),
                cond.ncols(),
            ));
        }
        Ok(Self { cond, ref_mel })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.ref_mel.dim()
    }
}

/// Anything that can predict the injected noise at step `t`.
pub trait NoisePredictor {
    fn predict_eps(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        bundle: &ConditionBundle,
    ) -> Result<Array2<f64>>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Array2<f64>, usize, &ConditionBundle) -> Array2<f64>,
{
    fn predict_eps(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        bundle: &ConditionBundle,
    ) -> Result<Array2<f64>> {
        Ok(self(x_t, t, bundle))
    }
}

/// Visited steps for a reduced sampling run, descending from `T` to `1`,
/// evenly strided. `steps == T` visits every step.
pub fn sampling_steps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::param(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    Ok((0..steps)
        .map(|j| {
            let frac = (steps - 1 - j) as f64 / (steps - 1) as f64;
            1 + (frac * (total - 1) as f64).round() as usize
        })
        .collect())
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Ancestral sampling from white noise.
///
/// Random draws come from a ChaCha8 stream seeded with `seed`, in this order:
/// the starting `x_T` (row-major), then one full `z` matrix for every visited
/// step except the last, which is noise-free. Each visited step reuses the
/// schedule's own `beta_t`.
pub fn sample(
    predictor: &impl NoisePredictor,
    bundle: &ConditionBundle,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let visits = sampling_steps(schedule.steps(), steps)?;
    let shape = bundle.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal(&mut rng, shape);
    for (i, &t) in visits.iter().enumerate() {
        let eps_hat = predictor.predict_eps(&x, t, bundle)?;
        let last = i + 1 == visits.len();
        let mean = reverse_mean(&x, t, &eps_hat, schedule)?;
        x = if last {
            mean
        } else {
            let z = standard_normal(&mut rng, shape);
            let sigma = schedule.beta(t).sqrt();
            Zip::from(&mean).and(&z).map_collect(|&m, &zz| m + sigma * zz)
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: t });
        }
    }
    Ok(x)
}

/// Weighted squared error normalized by the total weight, with its gradient
/// with respect to `eps_hat`.
pub fn weighted_eps_loss(
    eps_true: &Array2<f64>,
    eps_hat: &Array2<f64>,
    weights: &WeightMap,
) -> Result<(f64, Array2<f64>)> {
    same_shape(eps_true, eps_hat)?;
    let w = weights.data();
    same_shape(eps_true, w)?;
    if w.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::param("loss weights must be positive"));
    }
    let total: f64 = w.sum();
    let mut loss = 0.0;
    let mut grad = Array2::zeros(eps_true.dim());
    Zip::from(&mut grad)
        .and(eps_true)
        .and(eps_hat)
        .and(w)
        .for_each(|g, &e, &eh, &wt| {
            let d = e - eh;
            loss += wt * d * d;
            *g = -2.0 * wt * d / total;
        });
    Ok((loss / total, grad))
}

/// Maps log-mel values onto [-1, 1] with dataset-wide extremes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataNorm {
    pub log_min: f64,
    pub log_max: f64,
    pub log_floor: f64,
}

impl DataNorm {
    /// Statistics over the log-compressed versions of `mels` (linear inputs).
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a MelSpectrogram>, log_floor: f64) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in mels {
            if m.is_log() {
                return Err(Error::LogInput);
            }
            for &v in m.data().iter() {
                let l = f64::from(v).max(log_floor).ln();
                lo = lo.min(l);
                hi = hi.max(l);
            }
        }
        if !(hi > lo) {
            return Err(Error::param("cannot normalize: data has no dynamic range"));
        }
        Ok(Self {
            log_min: lo,
            log_max: hi,
            log_floor,
        })
    }

    /// Linear mel to the diffusion domain.
    pub fn normalize(&self, mel: &MelSpectrogram) -> Result<Array2<f64>> {
        if mel.is_log() {
            return Err(Error::LogInput);
        }
        let span = self.log_max - self.log_min;
        Ok(mel
            .data()
            .mapv(|v| 2.0 * (f64::from(v).max(self.log_floor).ln() - self.log_min) / span - 1.0))
    }

    /// Diffusion domain back to natural-log mel values.
    pub fn denormalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let span = self.log_max - self.log_min;
        x.mapv(|v| (v + 1.0) / 2.0 * span + self.log_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((rows, cols), v.to_vec()).unwrap()
    }

    #[test]
    fn schedule_cases() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);

        let s = make_schedule(7, 0.02, 0.02).unwrap();
        for t in 1..=7 {
            assert!((s.alpha_bar(t) - 0.98f64.powi(t as i32)).abs() < 1e-15);
        }

        let s = make_schedule(100, 1e-4, 0.06).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(100) - 0.06).abs() < 1e-15);
        // independent route: sum of logs, Kahan-compensated
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for t in 1..=100 {
            let beta = 1e-4 + (0.06 - 1e-4) * (t - 1) as f64 / 99.0;
            let y = (-beta).ln_1p() - comp;
            let next = sum + y;
            comp = (next - sum) - y;
            sum = next;
        }
        assert!((s.alpha_bar(100) - sum.exp()).abs() < 1e-12);
        assert!(s.alpha_bars().windows(2).all(|p| p[1] < p[0]));
        assert!(s.alpha_bar(100) > 0.0);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.2]).is_err());
        assert_eq!(make_schedule(1, 0.01, 0.5).unwrap().betas(), &[0.01]);
    }

    #[test]
    fn schedule_json_shape() {
        let json = serde_json::to_value(ScheduleConfig::default()).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"T": 100, "beta_min": 1e-4, "beta_max": 0.06, "kind": "linear"})
        );
    }

    #[test]
    fn forward_degenerate_cases() {
        let tiny = make_schedule(3, 1e-15, 1e-15).unwrap();
        let x0 = mat(1, 3, &[0.2, -1.0, 3.0]);
        let e = mat(1, 3, &[1.0, 1.0, -1.0]);
        let xt = q_sample(&x0, 3, &e, &tiny).unwrap();
        for (a, b) in xt.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-7);
        }

        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let zero = Array2::zeros((1, 3));
        let xt = q_sample(&x0, 5, &zero, &s).unwrap();
        for (a, b) in xt.iter().zip(x0.iter()) {
            assert!((a - s.alpha_bar(5).sqrt() * b).abs() < 1e-15);
        }
        let xt = q_sample(&zero, 5, &e, &s).unwrap();
        for (a, b) in xt.iter().zip(e.iter()) {
            assert!((a - (1.0 - s.alpha_bar(5)).sqrt() * b).abs() < 1e-15);
        }

        let xs = q_step(&x0, 2, &e, &tiny).unwrap();
        for (a, b) in xs.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
        let xs = q_step(&zero, 4, &e, &s).unwrap();
        for (a, b) in xs.iter().zip(e.iter()) {
            assert!((a - s.beta(4).sqrt() * b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_errors() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((3, 2));
        assert!(matches!(q_sample(&a, 1, &b, &s), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(q_sample(&a, 0, &a, &s), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(q_step(&a, 11, &a, &s), Err(Error::StepOutOfRange { .. })));
        assert!(reverse_mean(&a, 1, &b, &s).is_err());
        assert!(p_step(&a, 2, &a, &b, &s).is_err());
    }

    #[test]
    fn q_sample_inverts_exactly() {
        let s = make_schedule(100, 1e-4, 0.06).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = standard_normal(&mut rng, (4, 9));
        let e = standard_normal(&mut rng, (4, 9));
        for t in [1, 17, 63, 100] {
            let xt = q_sample(&x0, t, &e, &s).unwrap();
            let ab = s.alpha_bar(t);
            for ((&a, &x), &n) in x0.iter().zip(xt.iter()).zip(e.iter()) {
                let back = (x - (1.0 - ab).sqrt() * n) / ab.sqrt();
                assert!((back - a).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn reverse_mean_cases() {
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let x = mat(1, 2, &[0.4, -2.0]);
        let zero = Array2::zeros((1, 2));
        let m = reverse_mean(&x, 7, &zero, &s).unwrap();
        for (a, b) in m.iter().zip(x.iter()) {
            assert!((a - b / s.alpha(7).sqrt()).abs() < 1e-15);
        }

        let tiny = make_schedule(5, 1e-14, 1e-14).unwrap();
        let e = mat(1, 2, &[1.0, -1.0]);
        let m = reverse_mean(&x, 3, &e, &tiny).unwrap();
        for (a, b) in m.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reverse_mean_with_true_noise_is_posterior_mean() {
        let s = make_schedule(100, 1e-4, 0.06).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = standard_normal(&mut rng, (3, 5));
        let e = standard_normal(&mut rng, (3, 5));
        for t in [2, 30, 99] {
            let xt = q_sample(&x0, t, &e, &s).unwrap();
            let mu = reverse_mean(&xt, t, &e, &s).unwrap();
            // q(x_{t-1} | x_t, x_0) mean, from the alpha-bar values alone
            let ab = s.alpha_bar(t);
            let ab_prev = s.alpha_bar(t - 1);
            let a_t = ab / ab_prev;
            let c0 = ab_prev.sqrt() * (1.0 - a_t) / (1.0 - ab);
            let ct = a_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            for ((&m, &x), &x_0) in mu.iter().zip(xt.iter()).zip(x0.iter()) {
                assert!((m - (c0 * x_0 + ct * x)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn p_step_cases() {
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let x = mat(1, 2, &[0.4, -2.0]);
        let e = mat(1, 2, &[0.3, 0.1]);
        let zero = Array2::zeros((1, 2));
        let z = mat(1, 2, &[5.0, -5.0]);
        assert_eq!(
            p_step(&x, 9, &e, &zero, &s).unwrap(),
            reverse_mean(&x, 9, &e, &s).unwrap()
        );
        assert_eq!(
            p_step(&x, 1, &e, &z, &s).unwrap(),
            reverse_mean(&x, 1, &e, &s).unwrap()
        );
    }

    #[test]
    fn p_step_variance_is_beta() {
        let s = make_schedule(100, 1e-4, 0.06).unwrap();
        let t = 60;
        let x = mat(1, 1, &[0.7]);
        let e = mat(1, 1, &[-0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let z = standard_normal(&mut rng, (1, 1));
                p_step(&x, t, &e, &z, &s).unwrap()[[0, 0]]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - s.beta(t)).abs() < 0.05 * s.beta(t), "var {var}");
    }

    #[test]
    fn sampling_step_grid() {
        assert_eq!(sampling_steps(100, 100).unwrap(), (1..=100).rev().collect::<Vec<_>>());
        let s24 = sampling_steps(100, 24).unwrap();
        assert_eq!(s24.len(), 24);
        assert_eq!((s24[0], s24[23]), (100, 1));
        assert!(s24.windows(2).all(|p| p[0] > p[1]));
        assert_eq!(sampling_steps(10, 1).unwrap(), vec![10]);
        assert!(sampling_steps(100, 101).is_err());
        assert!(sampling_steps(100, 0).is_err());
    }

    #[test]
    fn zero_predictor_matches_reference_unroll() {
        let s = make_schedule(30, 1e-3, 0.08).unwrap();
        let bundle = ConditionBundle::new(Array2::zeros((1, 4)), Array2::zeros((2, 4))).unwrap();
        let zero_pred = |x: &Array2<f64>, _: usize, _: &ConditionBundle| Array2::zeros(x.dim());
        let got = sample(&zero_pred, &bundle, &s, 30, 77).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut x = standard_normal(&mut rng, (2, 4));
        for t in (1..=30).rev() {
            let scale = 1.0 / s.alpha(t).sqrt();
            if t > 1 {
                let z = standard_normal(&mut rng, (2, 4));
                x = Zip::from(&x)
                    .and(&z)
                    .map_collect(|&v, &zz| scale * (v - 0.0) + s.beta(t).sqrt() * zz);
            } else {
                x = x.mapv(|v| scale * (v - 0.0));
            }
        }
        assert_eq!(got, x);
    }

    #[test]
    fn sample_is_deterministic_and_bounded() {
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let bundle = ConditionBundle::new(Array2::zeros((2, 6)), Array2::zeros((3, 6))).unwrap();
        let pred = |x: &Array2<f64>, _: usize, _: &ConditionBundle| x.mapv(|v| 0.1 * v);
        let a = sample(&pred, &bundle, &s, 20, 5).unwrap();
        let b = sample(&pred, &bundle, &s, 20, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&pred, &bundle, &s, 20, 6).unwrap());
        assert!(sample(&pred, &bundle, &s, 51, 5).is_err());
    }

    #[test]
    fn loss_cases() {
        let e = mat(2, 2, &[0.5, -1.0, 2.0, 0.0]);
        let h = mat(2, 2, &[0.0, -0.5, 1.0, 1.0]);
        let ones = WeightMap::uniform(2, 2);
        let (l, _) = weighted_eps_loss(&e, &h, &ones).unwrap();
        let mse = (0.25 + 0.25 + 1.0 + 1.0) / 4.0;
        assert!((l - mse).abs() < 1e-15);

        let (l, g) = weighted_eps_loss(&e, &e, &ones).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));

        let w = WeightMap::from_array(mat(2, 2, &[1.0, 1.0, 2.0, 2.0])).unwrap();
        let (l, g) = weighted_eps_loss(&e, &h, &w).unwrap();
        // (0.25 + 0.25 + 2*1 + 2*1) / 6
        assert!((l - 4.5 / 6.0).abs() < 1e-15);
        let step = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut up = h.clone();
                up[[i, j]] += step;
                let mut dn = h.clone();
                dn[[i, j]] -= step;
                let fd = (weighted_eps_loss(&e, &up, &w).unwrap().0
                    - weighted_eps_loss(&e, &dn, &w).unwrap().0)
                    / (2.0 * step);
                assert!((fd - g[[i, j]]).abs() <= 1e-8 * g[[i, j]].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn loss_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = standard_normal(&mut rng, (3, 5));
        let h = standard_normal(&mut rng, (3, 5));
        let (l1, g1) = weighted_eps_loss(&e, &h, &WeightMap::uniform(3, 5)).unwrap();
        let (l3, g3) =
            weighted_eps_loss(&e, &h, &WeightMap::from_array(Array2::from_elem((3, 5), 3.0)).unwrap())
                .unwrap();
        assert!((l1 - l3).abs() < 1e-14);
        for (a, b) in g1.iter().zip(g3.iter()) {
            assert!((a - b).abs() < 1e-14);
        }

        // region share of the gradient grows with lambda
        let share = |lambda: f64| {
            let mut w = Array2::ones((3, 5));
            w.column_mut(2).fill(lambda);
            let (_, g) = weighted_eps_loss(&e, &h, &WeightMap::from_array(w).unwrap()).unwrap();
            let region: f64 = g.column(2).iter().map(|v| v.abs()).sum();
            region / g.iter().map(|v| v.abs()).sum::<f64>()
        };
        assert!(share(2.0) > share(1.0));
        assert!(share(4.0) > share(2.0));
    }

    #[test]
    fn loss_errors() {
        let a = Array2::zeros((2, 2));
        assert!(weighted_eps_loss(&a, &Array2::zeros((2, 3)), &WeightMap::uniform(2, 2)).is_err());
        assert!(weighted_eps_loss(&a, &a, &WeightMap::uniform(2, 3)).is_err());
        assert!(WeightMap::from_array(Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn norm_maps_to_unit_interval() {
        let m = MelSpectrogram::new(mat(1, 3, &[1e-3, 0.5, 2.0]).mapv(|v| v as f32), 128, false)
            .unwrap();
        let n = DataNorm::fit([&m], 1e-5).unwrap();
        let x = n.normalize(&m).unwrap();
        assert!((x[[0, 0]] + 1.0).abs() < 1e-12);
        assert!((x[[0, 2]] - 1.0).abs() < 1e-12);
        let back = n.denormalize(&x);
        assert!((back[[0, 1]] - (0.5f32 as f64).ln()).abs() < 1e-12);
    }
}
