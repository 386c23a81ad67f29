//! Adam training of the denoiser on synthetic data, plus the sampling-based
//! metrics used to compare variants.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    backward_into, backward_reference, denoiser_forward, reference_forward, Checkpoint,
    DenoiserConfig, DenoiserParams, ReferencedDenoiser,
};
use crate::diffusion::{
    q_sample, sample, standard_normal, weighted_eps_loss, ConditionBundle, DataNorm, NoiseSchedule,
    ScheduleConfig,
};
use crate::dsp::{MelSpectrogram, DEFAULT_LOG_FLOOR};
use crate::error::{Error, Result};
use crate::synthgen::SynthSample;
use crate::transition::{analyze, blur_regions, weight_map, AnalysisParams, TransitionRegionSet, WeightMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: DenoiserParams,
    pub v: DenoiserParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: DenoiserConfig) -> Self {
        Self {
            m: DenoiserParams::zeros_like(config),
            v: DenoiserParams::zeros_like(config),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update of a flat slice; `step` is the 1-based count
/// including this update.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape(n, (grads.len(), m.len(), v.len())));
    }
    if step == 0 {
        return Err(Error::param("Adam step count starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..n {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

pub fn adam_step(
    params: &mut DenoiserParams,
    grads: &DenoiserParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    params.same_layout(grads)?;
    params.same_layout(&state.m)?;
    state.step += 1;
    let step = state.step;
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    let mut m = state.m.tensors_mut();
    let mut v = state.v.tensors_mut();
    for i in 0..p.len() {
        adam_update(p[i], g[i].1, m[i], v[i], step, lr, cfg)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Loss weight inside detected transition regions when weighting is on.
    pub lambda_in: f64,
    pub blur: bool,
    pub weighting: bool,
    pub reference: bool,
    /// Update the reference branch; when false it keeps its initial copy.
    pub train_reference: bool,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    /// Detection window, smoothing and blur kernel.
    pub analysis: AnalysisParams,
    pub adam: AdamConfig,
    /// Probe-loss cadence in steps; 0 records only the first and last step.
    pub eval_every: usize,
    /// Items in the fixed probe batch.
    pub probe_size: usize,
    pub log_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            total_steps: 2000,
            lambda_in: 2.0,
            blur: true,
            weighting: true,
            reference: true,
            train_reference: true,
            seed: 0,
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::default(),
            analysis: AnalysisParams::default(),
            adam: AdamConfig::default(),
            eval_every: 0,
            probe_size: 16,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        if !(self.lambda_in >= 1.0) {
            return Err(Error::param("lambda_in must be >= 1"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::param("log floor must be positive"));
        }
        if self.probe_size == 0 {
            return Err(Error::param("probe size must be at least 1"));
        }
        self.model.validate()?;
        self.analysis.validate()?;
        self.schedule.build()?;
        Ok(())
    }
}

/// A sample mapped into the diffusion domain with its training aids.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// Normalized log ground truth, `F x T`.
    pub target: Array2<f64>,
    /// Normalized log reference, blurred inside `detected` when enabled.
    pub reference: Array2<f64>,
    pub cond: Array2<f64>,
    pub weights: WeightMap,
    /// Regions found by the detector on the reference.
    pub detected: TransitionRegionSet,
    /// Oracle regions, used only for evaluation.
    pub true_regions: TransitionRegionSet,
}

impl PreparedSample {
    pub fn bundle(&self) -> Result<ConditionBundle> {
        ConditionBundle::new(self.cond.clone(), self.reference.clone())
    }
}

pub fn fit_norm(samples: &[SynthSample], log_floor: f64) -> Result<DataNorm> {
    DataNorm::fit(
        samples.iter().flat_map(|s| [&s.gt_mel, &s.ref_mel]),
        log_floor,
    )
}

/// Detects regions on the reference, blurs and weights per `cfg`.
pub fn prepare_sample(s: &SynthSample, norm: &DataNorm, cfg: &TrainConfig) -> Result<PreparedSample> {
    let target = norm.normalize(&s.gt_mel)?;
    let mut reference = norm.normalize(&s.ref_mel)?;
    let detected = analyze(&s.ref_mel, &cfg.analysis)?.regions;
    if cfg.blur && !detected.is_empty() {
        let log_ref = MelSpectrogram::from_f64(&reference, s.ref_mel.hop(), true)?;
        let blurred = blur_regions(&log_ref, &detected, &cfg.analysis.kernel()?)?.to_f64();
        for r in detected.regions() {
            reference
                .slice_mut(s![.., r.clone()])
                .assign(&blurred.slice(s![.., r.clone()]));
        }
    }
    let weights = if cfg.weighting {
        weight_map(&detected, target.nrows(), cfg.lambda_in)?
    } else {
        WeightMap::uniform(target.nrows(), target.ncols())
    };
    Ok(PreparedSample {
        target,
        reference,
        cond: s.cond.clone(),
        weights,
        detected,
        true_regions: s.true_regions.clone(),
    })
}

pub fn prepare(samples: &[SynthSample], norm: &DataNorm, cfg: &TrainConfig) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare_sample(s, norm, cfg)).collect()
}

/// One noisy training item.
struct Item<'a> {
    sample: &'a PreparedSample,
    t: usize,
    noise: Array2<f64>,
}

fn draw_item<'a, R: Rng>(rng: &mut R, data: &'a [PreparedSample], steps: usize) -> Item<'a> {
    let sample = &data[rng.random_range(0..data.len())];
    let t = rng.random_range(1..=steps);
    let noise = standard_normal(rng, sample.target.dim());
    Item { sample, t, noise }
}

/// Loss of one item; accumulates its gradient scaled by `scale` into `grads` when given.
fn item_loss(
    params: &DenoiserParams,
    item: &Item,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    grads: Option<(&mut DenoiserParams, f64)>,
) -> Result<f64> {
    let s = item.sample;
    let x_t = q_sample(&s.target, item.t, &item.noise, schedule)?;
    let c = params.config();
    let ro = if cfg.reference {
        Some(reference_forward(params, &s.reference, &s.cond)?)
    } else {
        None
    };
    let hidden = match &ro {
        Some(r) => r.hidden(),
        None => vec![Array2::zeros((c.hidden, s.target.ncols())); c.layers],
    };
    let (eps_hat, trace) = denoiser_forward(params, &x_t, item.t, &s.cond, &hidden)?;
    let (loss, mut dl) = weighted_eps_loss(&item.noise, &eps_hat, &s.weights)?;
    if let Some((g, scale)) = grads {
        dl *= scale;
        let d_ref = backward_into(params, &trace, &dl, g)?;
        if let (Some(r), true) = (&ro, cfg.train_reference) {
            backward_reference(params, r, &d_ref, g)?;
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: DenoiserParams,
    pub norm: DataNorm,
    pub config: TrainConfig,
    /// Mean batch loss of every step.
    pub loss_curve: Vec<f64>,
    /// Loss on a fixed probe batch, at step 0, every `eval_every` steps and at the end.
    pub probe_curve: Vec<ProbePoint>,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            params: self.params.clone(),
            schedule: self.config.schedule,
            norm: self.norm,
            extra: serde_json::json!({
                "train_config": serde_json::to_value(&self.config)?,
                "steps_done": self.loss_curve.len(),
            }),
        })
    }
}

/// Fits the normalization on `samples`, prepares them and trains.
pub fn train(config: &TrainConfig, samples: &[SynthSample]) -> Result<TrainOutput> {
    if samples.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    config.validate()?;
    let norm = fit_norm(samples, config.log_floor)?;
    let data = prepare(samples, &norm, config)?;
    train_prepared(config, &data, norm, |_, _| {})
}

/// Training loop on already prepared data. `progress(step, loss)` is called
/// after every update.
pub fn train_prepared(
    config: &TrainConfig,
    data: &[PreparedSample],
    norm: DataNorm,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    config.validate()?;
    let c = config.model;
    for d in data {
        if d.target.nrows() != c.n_mels || d.cond.nrows() != c.cond_dim {
            return Err(Error::shape((c.n_mels, c.cond_dim), (d.target.nrows(), d.cond.nrows())));
        }
    }
    let schedule = config.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = DenoiserParams::init(c, rng.random())?;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let probe: Vec<Item> = (0..config.probe_size)
        .map(|_| draw_item(&mut probe_rng, data, schedule.steps()))
        .collect();
    let probe_loss = |p: &DenoiserParams| -> Result<f64> {
        let mut acc = 0.0;
        for it in &probe {
            acc += item_loss(p, it, &schedule, config, None)?;
        }
        Ok(acc / probe.len() as f64)
    };

    let mut state = AdamState::new(c);
    let mut loss_curve = Vec::with_capacity(config.total_steps);
    let mut probe_curve = vec![ProbePoint {
        step: 0,
        loss: probe_loss(&params)?,
    }];
    let scale = 1.0 / config.batch_size as f64;
    for step in 1..=config.total_steps {
        let mut grads = DenoiserParams::zeros_like(c);
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let item = draw_item(&mut rng, data, schedule.steps());
            loss += item_loss(&params, &item, &schedule, config, Some((&mut grads, scale)))?;
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam_step(&mut params, &grads, &mut state, config.learning_rate, &config.adam)?;
        loss_curve.push(loss);
        progress(step, loss);
        if (config.eval_every > 0 && step % config.eval_every == 0) || step == config.total_steps {
            let l = probe_loss(&params)?;
            if !l.is_finite() {
                return Err(Error::Diverged { step });
            }
            probe_curve.push(ProbePoint { step, loss: l });
        }
    }
    Ok(TrainOutput {
        params,
        norm,
        config: config.clone(),
        loss_curve,
        probe_curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorSums {
    pub region_sse: f64,
    pub region_count: usize,
    pub nonregion_sse: f64,
    pub nonregion_count: usize,
}

impl ErrorSums {
    pub fn add(&mut self, pred: &Array2<f64>, target: &Array2<f64>, regions: &TransitionRegionSet) -> Result<()> {
        if pred.dim() != target.dim() {
            return Err(Error::shape(target.dim(), pred.dim()));
        }
        if regions.total_frames() != target.ncols() {
            return Err(Error::shape(target.ncols(), regions.total_frames()));
        }
        let mask = regions.mask();
        for (((_, t), &p), &g) in pred.indexed_iter().zip(target.iter()) {
            let d = (p - g) * (p - g);
            if mask[t] {
                self.region_sse += d;
                self.region_count += 1;
            } else {
                self.nonregion_sse += d;
                self.nonregion_count += 1;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub global_mse: f64,
    pub region_mse: f64,
    pub nonregion_mse: f64,
    pub region_count: usize,
    pub nonregion_count: usize,
    pub steps: usize,
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

impl Metrics {
    pub fn from_sums(s: &ErrorSums, steps: usize) -> Self {
        let ratio = |sse: f64, n: usize| if n == 0 { 0.0 } else { sse / n as f64 };
        Self {
            global_mse: ratio(s.region_sse + s.nonregion_sse, s.region_count + s.nonregion_count),
            region_mse: ratio(s.region_sse, s.region_count),
            nonregion_mse: ratio(s.nonregion_sse, s.nonregion_count),
            region_count: s.region_count,
            nonregion_count: s.nonregion_count,
            steps,
            loss_curve: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub steps: usize,
    pub seed: u64,
    pub reference: bool,
}

/// Samples every item and compares with the target in the normalized log
/// domain. Sample `i` uses sampling seed `seed + i`.
pub fn evaluate(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    data: &[PreparedSample],
    cfg: &EvalConfig,
) -> Result<Metrics> {
    if cfg.steps == 0 || cfg.steps > schedule.steps() {
        return Err(Error::StepOutOfRange {
            t: cfg.steps,
            max: schedule.steps(),
        });
    }
    let mut sums = ErrorSums::default();
    for (i, d) in data.iter().enumerate() {
        let bundle = d.bundle()?;
        let den = ReferencedDenoiser::new(params, &bundle, cfg.reference)?;
        let x = sample(&den, &bundle, schedule, cfg.steps, cfg.seed.wrapping_add(i as u64))?;
        sums.add(&x, &d.target, &d.true_regions)?;
    }
    Ok(Metrics::from_sums(&sums, cfg.steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoWeight,
    NoBlur,
    Neither,
    NoReference,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoWeight,
        Variant::NoBlur,
        Variant::Neither,
        Variant::NoReference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWeight => "no_weight",
            Variant::NoBlur => "no_blur",
            Variant::Neither => "neither",
            Variant::NoReference => "no_reference",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::param(format!("unknown variant {s:?}")))
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoWeight => c.weighting = false,
            Variant::NoBlur => c.blur = false,
            Variant::Neither => {
                c.weighting = false;
                c.blur = false;
            }
            Variant::NoReference => c.reference = false,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    /// Steps used for every variant.
    pub eval_steps: usize,
    /// Extra step counts evaluated on the first variant.
    pub step_sweep: Vec<usize>,
    pub eval_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            eval_steps: 100,
            step_sweep: vec![24, 54, 100],
            eval_seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub blur: bool,
    pub weighting: bool,
    pub reference: bool,
    /// Keyed by number of sampling steps.
    pub metrics: BTreeMap<usize, Metrics>,
    pub final_probe_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub base: TrainConfig,
    pub norm: DataNorm,
    pub eval_seed: u64,
    pub results: Vec<VariantResult>,
}

impl AblationTable {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }
}

/// Trains every configured variant on `train_set` with the base seed and
/// evaluates it on `eval_set`. `progress(variant, step, loss)` reports training.
pub fn ablation_suite(
    base: &TrainConfig,
    ablation: &AblationConfig,
    train_set: &[SynthSample],
    eval_set: &[SynthSample],
    mut progress: impl FnMut(Variant, usize, f64),
) -> Result<AblationTable> {
    base.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::param("ablation needs training and evaluation samples"));
    }
    let schedule = base.schedule.build()?;
    let norm = fit_norm(train_set, base.log_floor)?;
    let mut results = Vec::new();
    for (vi, &variant) in ablation.variants.iter().enumerate() {
        let cfg = variant.apply(base);
        let data = prepare(train_set, &norm, &cfg)?;
        let out = train_prepared(&cfg, &data, norm, |s, l| progress(variant, s, l))?;
        let held_out = prepare(eval_set, &norm, &cfg)?;
        let mut steps: Vec<usize> = vec![ablation.eval_steps];
        if vi == 0 {
            steps.extend(&ablation.step_sweep);
        }
        steps.sort_unstable();
        steps.dedup();
        let mut metrics = BTreeMap::new();
        for &st in &steps {
            let eval = EvalConfig {
                steps: st,
                seed: ablation.eval_seed,
                reference: cfg.reference,
            };
            let mut m = evaluate(&out.params, &schedule, &held_out, &eval)?;
            if st == ablation.eval_steps {
                m.loss_curve = out.loss_curve.clone();
            }
            metrics.insert(st, m);
        }
        results.push(VariantResult {
            variant,
            blur: cfg.blur,
            weighting: cfg.weighting,
            reference: cfg.reference,
            metrics,
            final_probe_loss: out.probe_curve.last().map(|p| p.loss).unwrap_or(f64::NAN),
        });
    }
    Ok(AblationTable {
        base: base.clone(),
        norm,
        eval_seed: ablation.eval_seed,
        results,
    })
}
