//! Synthetic singing-like spectrograms with known note boundaries.
//!
//! Each note puts its first five harmonics (amplitude `1/h`) into the mel
//! bands nearest to them, on top of a small noise floor. Consecutive notes are
//! cross-faded over three frames, and every new note opens with a short
//! broadband burst in the upper half of the bands, the way a consonant onset
//! would. Spectrograms are kept linear so the transition detector can run on
//! them; the trainer maps them to the log domain.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_mels, write_mels, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::transition::{build_regions, TransitionRegionSet};

pub const MIN_PITCH_HZ: f64 = 80.0;
pub const MAX_PITCH_HZ: f64 = 1000.0;
pub const MIN_NOTE_FRAMES: usize = 4;
pub const HARMONICS: usize = 5;
/// Reach of the reference smearing on each side of a boundary.
pub const SMEAR_RADIUS: usize = 4;

const NOISE_FLOOR: f64 = 1e-3;
const JITTER: f64 = 0.05;
const BURST_LEVEL: f64 = 0.05;
/// Burst envelope over the first frames of each new note.
const BURST_PROFILE: [f64; 3] = [0.6, 1.0, 0.5];
/// Bound of the multiplicative noise; its RMS is this over sqrt(3).
const DEGRADE_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub pitch_hz: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub notes: Vec<Note>,
    pub sample_rate: u32,
    pub mel: MelConfig,
}

impl ScoreSpec {
    pub fn new(notes: Vec<Note>, sample_rate: u32, mel: MelConfig) -> Result<Self> {
        let s = Self {
            notes,
            sample_rate,
            mel,
        };
        s.validate()?;
        Ok(s)
    }

    /// Convenience constructor with the default sample rate and mel layout.
    pub fn from_notes(notes: &[(f64, usize)]) -> Result<Self> {
        Self::new(
            notes
                .iter()
                .map(|&(pitch_hz, frames)| Note { pitch_hz, frames })
                .collect(),
            44_100,
            MelConfig::default(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.notes.is_empty() {
            return Err(Error::param("score has no notes"));
        }
        for n in &self.notes {
            if !(MIN_PITCH_HZ..=MAX_PITCH_HZ).contains(&n.pitch_hz) {
                return Err(Error::param(format!(
                    "pitch {} Hz outside [{MIN_PITCH_HZ}, {MAX_PITCH_HZ}]",
                    n.pitch_hz
                )));
            }
            if n.frames < MIN_NOTE_FRAMES {
                return Err(Error::param(format!(
                    "note of {} frames is shorter than {MIN_NOTE_FRAMES}",
                    n.frames
                )));
            }
        }
        if self.sample_rate == 0 || self.mel.hop == 0 || self.mel.n_mels < 2 {
            return Err(Error::param("invalid sample configuration"));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.notes.iter().map(|n| n.frames).sum()
    }

    /// Cumulative note starts, excluding 0 and the end.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = Vec::with_capacity(self.notes.len().saturating_sub(1));
        for n in &self.notes[..self.notes.len() - 1] {
            acc += n.frames;
            out.push(acc);
        }
        out
    }

    /// Weight of the incoming note at `frame` relative to boundary `b`:
    /// 0.25, 0.5, 0.75 over frames `b-1, b, b+1`.
    fn fade(b: usize, frame: usize) -> Option<f64> {
        let d = frame as isize - b as isize;
        (-1..=1).contains(&d).then(|| 0.5 + 0.25 * d as f64)
    }

    /// Per-frame `(note index, weight)` contributions after cross-fading.
    fn frame_mix(&self) -> Vec<Vec<(usize, f64)>> {
        let total = self.total_frames();
        let mut owner = Vec::with_capacity(total);
        for (i, n) in self.notes.iter().enumerate() {
            owner.extend(std::iter::repeat_n(i, n.frames));
        }
        let bounds = self.boundaries();
        (0..total)
            .map(|t| {
                for (i, &b) in bounds.iter().enumerate() {
                    if let Some(w) = Self::fade(b, t) {
                        return vec![(i, 1.0 - w), (i + 1, w)];
                    }
                }
                vec![(owner[t], 1.0)]
            })
            .collect()
    }

    /// Per-frame pitch in Hz, linearly interpolated across cross-fades.
    pub fn f0_contour(&self) -> Vec<f64> {
        self.frame_mix()
            .iter()
            .map(|mix| mix.iter().map(|&(i, w)| w * self.notes[i].pitch_hz).sum())
            .collect()
    }
}

/// Renders the linear mel spectrogram of `score`.
pub fn render_mel(score: &ScoreSpec, seed: u64) -> Result<MelSpectrogram> {
    score.validate()?;
    let bank = score.mel.filterbank(score.sample_rate)?;
    let nyquist = score.mel.fmax.unwrap_or(score.sample_rate as f64 / 2.0);
    let n_f = score.mel.n_mels;
    let total = score.total_frames();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + JITTER * rng.random_range(-1.0..1.0);

    let mut data = Array2::<f64>::zeros((n_f, total));
    for v in data.iter_mut() {
        *v = NOISE_FLOOR * jitter(&mut rng);
    }
    let bins: Vec<Vec<usize>> = score
        .notes
        .iter()
        .map(|n| {
            (1..=HARMONICS)
                .map(|h| h as f64 * n.pitch_hz)
                .take_while(|&f| f <= nyquist)
                .map(|f| bank.nearest_band(f))
                .collect()
        })
        .collect();
    for (t, mix) in score.frame_mix().iter().enumerate() {
        for &(i, w) in mix {
            for (h, &bin) in bins[i].iter().enumerate() {
                data[[bin, t]] += w * jitter(&mut rng) / (h + 1) as f64;
            }
        }
    }
    let split = n_f / 2;
    for b in score.boundaries() {
        for (j, &level) in BURST_PROFILE.iter().enumerate() {
            let t = b + j;
            for f in split..n_f {
                data[[f, t]] += BURST_LEVEL * level * rng.random_range(0.5..1.5);
            }
        }
    }
    MelSpectrogram::from_f64(&data, score.mel.hop as u32, false)
}

/// Emulates an acoustic model's output: smears and flattens the spectrum
/// around note boundaries in proportion to `strength`, and adds
/// multiplicative noise of at most 1% everywhere.
pub fn degrade_reference(
    gt: &MelSpectrogram,
    score: &ScoreSpec,
    strength: f64,
    seed: u64,
) -> Result<MelSpectrogram> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::param(format!("strength must be in [0, 1], got {strength}")));
    }
    if gt.is_log() {
        return Err(Error::LogInput);
    }
    if gt.n_frames() != score.total_frames() {
        return Err(Error::shape(score.total_frames(), gt.n_frames()));
    }
    let src = gt.to_f64();
    let (n_f, n_t) = src.dim();
    let r = SMEAR_RADIUS as isize;

    // closeness to the nearest boundary, 1 at the boundary, 0 beyond the radius
    let mut closeness = vec![0.0f64; n_t];
    for b in score.boundaries() {
        for d in -r..=r {
            let t = b as isize + d;
            if (0..n_t as isize).contains(&t) {
                let c = 1.0 - d.unsigned_abs() as f64 / (SMEAR_RADIUS + 1) as f64;
                closeness[t as usize] = closeness[t as usize].max(c);
            }
        }
    }

    let mut out = src.clone();
    if strength > 0.0 {
        for t in 0..n_t {
            let c = strength * closeness[t];
            if c == 0.0 {
                continue;
            }
            // triangular moving average over +-SMEAR_RADIUS frames
            let mut wsum = 0.0;
            let mut avg = vec![0.0; n_f];
            for d in -r..=r {
                let s = t as isize + d;
                if !(0..n_t as isize).contains(&s) {
                    continue;
                }
                let w = (r + 1 - d.abs()) as f64;
                wsum += w;
                for f in 0..n_f {
                    avg[f] += w * src[[f, s as usize]];
                }
            }
            let mean_level = avg.iter().sum::<f64>() / wsum / n_f as f64;
            let flat = 0.3 * c;
            for f in 0..n_f {
                let smeared = (1.0 - c) * src[[f, t]] + c * avg[f] / wsum;
                out[[f, t]] = (1.0 - flat) * smeared + flat * mean_level;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.iter_mut() {
        *v *= 1.0 + DEGRADE_NOISE * rng.random_range(-1.0..=1.0);
    }
    MelSpectrogram::from_f64(&out, gt.hop(), false)
}

/// One window of size `w` centred on each note boundary, merged.
pub fn true_transition_regions(score: &ScoreSpec, w: usize) -> Result<TransitionRegionSet> {
    score.validate()?;
    build_regions(&score.boundaries(), w, score.total_frames())
}

/// Zero-mean, unit-variance contour over voiced frames; unvoiced frames are 0.
pub fn normalize_f0(f0: &[f64], voiced: &[bool]) -> Result<Vec<f64>> {
    if f0.len() != voiced.len() {
        return Err(Error::shape(f0.len(), voiced.len()));
    }
    let vals: Vec<f64> = f0
        .iter()
        .zip(voiced)
        .filter(|(_, &v)| v)
        .map(|(&f, _)| f)
        .collect();
    if vals.len() < 2 {
        return Err(Error::param("need at least two voiced frames"));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::param("voiced F0 has zero variance"));
    }
    let sd = var.sqrt();
    Ok(f0
        .iter()
        .zip(voiced)
        .map(|(&f, &v)| if v { (f - mean) / sd } else { 0.0 })
        .collect())
}

/// Row 0: normalized F0, row 1: voicing flag.
pub fn condition_matrix(score: &ScoreSpec) -> Result<Array2<f64>> {
    let f0 = score.f0_contour();
    let voiced = vec![true; f0.len()];
    let norm = normalize_f0(&f0, &voiced)?;
    let mut cond = Array2::zeros((2, f0.len()));
    for (t, (&v, &on)) in norm.iter().zip(&voiced).enumerate() {
        cond[[0, t]] = v;
        cond[[1, t]] = if on { 1.0 } else { 0.0 };
    }
    Ok(cond)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub score: ScoreSpec,
    /// Linear-domain ground truth.
    pub gt_mel: MelSpectrogram,
    /// Linear-domain degraded reference.
    pub ref_mel: MelSpectrogram,
    /// `2 x T`.
    pub cond: Array2<f64>,
    pub true_regions: TransitionRegionSet,
}

impl SynthSample {
    pub fn generate(score: ScoreSpec, strength: f64, window: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt_mel = render_mel(&score, rng.random())?;
        let ref_mel = degrade_reference(&gt_mel, &score, strength, rng.random())?;
        let cond = condition_matrix(&score)?;
        let true_regions = true_transition_regions(&score, window)?;
        Ok(Self {
            score,
            gt_mel,
            ref_mel,
            cond,
            true_regions,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.gt_mel.n_frames()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub min_notes: usize,
    pub max_notes: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// MIDI note range of the semitone grid.
    pub min_midi: u8,
    pub max_midi: u8,
    pub strength: f64,
    /// Window of the oracle transition regions.
    pub window: usize,
    pub sample_rate: u32,
    pub mel: MelConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            min_notes: 3,
            max_notes: 8,
            min_frames: 8,
            max_frames: 40,
            // 110 Hz to 440 Hz; five harmonics stay in the lower half of the bands
            min_midi: 45,
            max_midi: 69,
            strength: 1.0,
            window: 8,
            sample_rate: 44_100,
            mel: MelConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_notes < 2 || self.min_notes > self.max_notes {
            return Err(Error::param("note count range must satisfy 2 <= min <= max"));
        }
        if self.min_frames < MIN_NOTE_FRAMES || self.min_frames > self.max_frames {
            return Err(Error::param(format!(
                "duration range must satisfy {MIN_NOTE_FRAMES} <= min <= max"
            )));
        }
        if self.min_midi >= self.max_midi {
            return Err(Error::param("pitch range needs at least two semitones"));
        }
        for m in [self.min_midi, self.max_midi] {
            if !(MIN_PITCH_HZ..=MAX_PITCH_HZ).contains(&midi_to_hz(m)) {
                return Err(Error::param(format!("MIDI note {m} outside the pitch range")));
            }
        }
        if self.window == 0 {
            return Err(Error::param("window must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::param("strength must be in [0, 1]"));
        }
        Ok(())
    }
}

pub fn midi_to_hz(m: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(m) - 69.0) / 12.0)
}

/// Random score for sample `index`; consecutive notes always differ in pitch.
pub fn random_score(cfg: &DatasetConfig, rng: &mut impl Rng) -> Result<ScoreSpec> {
    let n = rng.random_range(cfg.min_notes..=cfg.max_notes);
    let mut notes = Vec::with_capacity(n);
    let mut prev = None;
    for _ in 0..n {
        let mut m = rng.random_range(cfg.min_midi..=cfg.max_midi);
        while Some(m) == prev {
            m = rng.random_range(cfg.min_midi..=cfg.max_midi);
        }
        prev = Some(m);
        notes.push(Note {
            pitch_hz: midi_to_hz(m),
            frames: rng.random_range(cfg.min_frames..=cfg.max_frames),
        });
    }
    ScoreSpec::new(notes, cfg.sample_rate, cfg.mel)
}

/// Sample `index` of the dataset seeded by `seed`; independent of `n`.
pub fn make_sample(cfg: &DatasetConfig, seed: u64, index: u64) -> Result<SynthSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let score = random_score(cfg, &mut rng)?;
    SynthSample::generate(score, cfg.strength, cfg.window, rng.random())
}

pub fn make_dataset(n: usize, seed: u64, cfg: &DatasetConfig) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::param("dataset size must be at least 1"));
    }
    (0..n as u64).map(|i| make_sample(cfg, seed, i)).collect()
}

/// One JSON line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Paths relative to the manifest.
    pub gt: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub n_frames: usize,
    pub hop: u32,
    pub score: ScoreSpec,
    pub window: usize,
    pub regions: Vec<[usize; 2]>,
    pub cond: Vec<Vec<f64>>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes `gt_XXXX.mels`, `ref_XXXX.mels` and `manifest.jsonl` into `dir`.
pub fn write_dataset(dir: &Path, samples: &[SynthSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_NAME);
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:04}");
        let gt = format!("gt_{id}.mels");
        let reference = format!("ref_{id}.mels");
        write_mels(dir.join(&gt), &s.gt_mel)?;
        write_mels(dir.join(&reference), &s.ref_mel)?;
        let rec = ManifestRecord {
            id,
            gt,
            reference,
            n_frames: s.n_frames(),
            hop: s.gt_mel.hop(),
            score: s.score.clone(),
            window: s.true_regions.window(),
            regions: s.true_regions.as_pairs(),
            cond: s.cond.outer_iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

impl ManifestRecord {
    /// Loads the spectrograms next to the manifest at `manifest`.
    pub fn load(&self, manifest: &Path) -> Result<SynthSample> {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let gt_mel = read_mels(dir.join(&self.gt))?;
        let ref_mel = read_mels(dir.join(&self.reference))?;
        let rows = self.cond.len();
        let flat: Vec<f64> = self.cond.iter().flatten().copied().collect();
        let cond = Array2::from_shape_vec((rows, self.n_frames), flat)
            .map_err(|_| Error::Format(format!("record {}: bad condition shape", self.id)))?;
        for m in [&gt_mel, &ref_mel] {
            if m.n_frames() != self.n_frames {
                return Err(Error::shape(self.n_frames, m.n_frames()));
            }
        }
        let true_regions = TransitionRegionSet::from_intervals(
            self.regions.iter().map(|&[s, e]| s..e).collect(),
            self.window,
            self.n_frames,
        )?;
        Ok(SynthSample {
            score: self.score.clone(),
            gt_mel,
            ref_mel,
            cond,
            true_regions,
        })
    }
}

pub fn read_dataset(manifest: &Path) -> Result<Vec<SynthSample>> {
    read_manifest(manifest)?
        .iter()
        .map(|r| r.load(manifest))
        .collect()
}
