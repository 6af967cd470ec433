//! Synthetic multi-modal datasets driven by a shared per-window latent
//! factor, their on-disk format, and window-level splitting.
//!
//! Every window `w` draws a fundamental frequency `z_w` uniformly from the
//! latent band, plus a phase and a shape factor `s_w` in `[0, 1)`, all
//! shared by every modality. Each modality renders them through its own
//! structure family:
//!
//! * `quasi_periodic`: harmonics of `z_w` with weights `1, r, r/2` where
//!   `r = 0.1 + 0.4 s_w`,
//! * `trend`: a linear ramp whose slope is proportional to `z_w` (centred)
//!   plus a symmetric bend set by `s_w`, clipped to the amplitude range.
//!   The bend is orthogonal to the ramp, so the fitted slope still tracks
//!   `z_w`,
//! * `burst`: Gaussian-enveloped noise bursts whose count grows with `z_w`.
//!
//! Noise is modality-specific and scales with `noise_std`: white Gaussian
//! noise with standard deviation `noise_std * (high - low) / 2`, plus a
//! per-window baseline offset and, for quasi-periodic modalities, a linear
//! drift. Sample values are stored as `f32`.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

fn harmonic_weights(shape: f64) -> [f64; 3] {
    let r = 0.1 + 0.4 * shape;
    [1.0, r, 0.5 * r]
}
/// Fraction of the half-range used by the clean signal.
const FILL: f64 = 0.8;
/// Baseline offset and drift bounds, in half-ranges per unit `noise_std`.
const OFFSET_PER_NOISE: f64 = 2.5;
const DRIFT_PER_NOISE: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    QuasiPeriodic,
    Trend,
    Burst,
    /// Derived magnitude spectrum of another modality.
    Spectrum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
    pub kind: SignalKind,
    pub amplitude_range: (f64, f64),
    #[serde(default)]
    pub noise_std: f64,
}

impl ModalitySpec {
    pub fn new(name: &str, channels: usize, kind: SignalKind, range: (f64, f64), noise: f64) -> Self {
        ModalitySpec {
            name: name.to_string(),
            channels,
            kind,
            amplitude_range: range,
            noise_std: noise,
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let field = |f: &str| format!("modalities[{index}].{f}");
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::param(format!(
                "{}: `{}` must be non-empty [A-Za-z0-9_-]",
                field("name"),
                self.name
            )));
        }
        if self.channels == 0 {
            return Err(Error::param(format!("{} must be >= 1", field("channels"))));
        }
        let (lo, hi) = self.amplitude_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::param(format!(
                "{} needs low < high, got ({lo}, {hi})",
                field("amplitude_range")
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::param(format!("{} must be >= 0", field("noise_std"))));
        }
        Ok(())
    }

    fn mid_half(&self) -> (f64, f64) {
        let (lo, hi) = self.amplitude_range;
        ((lo + hi) / 2.0, (hi - lo) / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    None,
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { n_classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Regression(Vec<f32>),
    Classification { classes: Vec<u32>, n_classes: usize },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Regression(v) => v.len(),
            Labels::Classification { classes, .. } => classes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> LabelKind {
        match self {
            Labels::Regression(_) => LabelKind::Regression,
            Labels::Classification { .. } => LabelKind::Classification,
        }
    }

    fn subset(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Regression(v) => Labels::Regression(idx.iter().map(|&i| v[i]).collect()),
            Labels::Classification { classes, n_classes } => Labels::Classification {
                classes: idx.iter().map(|&i| classes[i]).collect(),
                n_classes: *n_classes,
            },
        }
    }
}

/// Hidden per-window factors, kept in memory for oracles only.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    /// Fundamental frequency in Hz.
    pub z: Vec<f64>,
    pub phase: Vec<f64>,
    pub shape: Vec<f64>,
}

impl Latent {
    fn subset(&self, idx: &[usize]) -> Latent {
        Latent {
            z: idx.iter().map(|&i| self.z[i]).collect(),
            phase: idx.iter().map(|&i| self.phase[i]).collect(),
            shape: idx.iter().map(|&i| self.shape[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_windows: usize,
    pub fs: f64,
    pub window_len: usize,
    pub modalities: Vec<ModalitySpec>,
    pub task: Task,
    /// Range of the latent fundamental frequency in Hz.
    pub latent_band: (f64, f64),
    /// Append a magnitude-spectrum modality for every quasi-periodic one.
    pub fourier_channels: bool,
}

fn default_band() -> (f64, f64) {
    (1.0, 3.0)
}

impl Default for GeneratorConfig {
    /// Desk-scale default: two quasi-periodic modalities and one trend
    /// modality, 512 windows of 128 samples at 50 Hz.
    fn default() -> Self {
        GeneratorConfig {
            seed: 7,
            n_windows: 512,
            fs: 50.0,
            window_len: 128,
            modalities: vec![
                ModalitySpec::new("ppg", 1, SignalKind::QuasiPeriodic, (-1.0, 1.0), 0.05),
                ModalitySpec::new("acc", 3, SignalKind::QuasiPeriodic, (0.0, 1000.0), 0.05),
                ModalitySpec::new("spo2", 1, SignalKind::Trend, (70.0, 100.0), 0.05),
            ],
            task: Task::Regression,
            latent_band: default_band(),
            fourier_channels: false,
        }
    }
}

/// Synchronized windows of every modality.
#[derive(Clone, Debug)]
pub struct MultiModalDataset {
    pub fs: f64,
    pub window_len: usize,
    pub modalities: Vec<ModalitySpec>,
    /// Per modality, row-major `[N x channels x window_len]`.
    pub windows: Vec<Vec<f32>>,
    pub labels: Option<Labels>,
    pub latent: Option<Latent>,
    /// Identity of each window in the dataset it was split from.
    pub window_ids: Vec<usize>,
}

/// Equality over persisted content; the latent factors are not compared.
impl PartialEq for MultiModalDataset {
    fn eq(&self, other: &Self) -> bool {
        self.fs.to_bits() == other.fs.to_bits()
            && self.window_len == other.window_len
            && self.modalities == other.modalities
            && self.labels == other.labels
            && self.window_ids == other.window_ids
            && self.windows.len() == other.windows.len()
            && self
                .windows
                .iter()
                .zip(&other.windows)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

impl MultiModalDataset {
    pub fn n_windows(&self) -> usize {
        self.window_ids.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Raw `[channels x window_len]` slice of window `i` of modality `m`.
    pub fn window(&self, m: usize, i: usize) -> &[f32] {
        let span = self.modalities[m].channels * self.window_len;
        &self.windows[m][i * span..(i + 1) * span]
    }

    pub fn window_tensor(&self, m: usize, i: usize) -> Tensor {
        let data = self.window(m, i).iter().map(|&v| f64::from(v)).collect();
        Tensor::new(vec![self.modalities[m].channels, self.window_len], data).expect("window shape")
    }

    pub fn label_kind(&self) -> LabelKind {
        self.labels.as_ref().map_or(LabelKind::None, Labels::kind)
    }

    /// Windows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> MultiModalDataset {
        let windows = self
            .modalities
            .iter()
            .enumerate()
            .map(|(m, spec)| {
                let span = spec.channels * self.window_len;
                let mut out = Vec::with_capacity(idx.len() * span);
                for &i in idx {
                    out.extend_from_slice(&self.windows[m][i * span..(i + 1) * span]);
                }
                out
            })
            .collect();
        MultiModalDataset {
            fs: self.fs,
            window_len: self.window_len,
            modalities: self.modalities.clone(),
            windows,
            labels: self.labels.as_ref().map(|l| l.subset(idx)),
            latent: self.latent.as_ref().map(|l| l.subset(idx)),
            window_ids: idx.iter().map(|&i| self.window_ids[i]).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::param("dataset has no modalities"));
        }
        let n = self.n_windows();
        for (m, spec) in self.modalities.iter().enumerate() {
            spec.validate(m)?;
            if self.windows[m].len() != n * spec.channels * self.window_len {
                return Err(Error::dim(format!(
                    "modality `{}` holds {} samples, expected {}",
                    spec.name,
                    self.windows[m].len(),
                    n * spec.channels * self.window_len
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::dim(format!("{} labels for {n} windows", l.len())));
            }
        }
        Ok(())
    }
}

/// Clean (noise-free) value of a quasi-periodic modality.
pub fn harmonic_value(spec: &ModalitySpec, z: f64, phase: f64, shape: f64, channel: usize, t: f64) -> f64 {
    let (mid, half) = spec.mid_half();
    let weights = harmonic_weights(shape);
    let norm: f64 = weights.iter().sum();
    let shift = phase + 0.3 * channel as f64;
    let s: f64 = weights
        .iter()
        .enumerate()
        .map(|(h, a)| {
            let k = (h + 1) as f64;
            a * (2.0 * PI * k * z * t + k * shift).sin()
        })
        .sum();
    mid + half * FILL * s / norm
}

/// Largest/smallest f32 values inside `[lo, hi]`.
fn f32_bounds(lo: f64, hi: f64) -> (f32, f32) {
    let mut l = lo as f32;
    if f64::from(l) < lo {
        l = l.next_up();
    }
    let mut h = hi as f32;
    if f64::from(h) > hi {
        h = h.next_down();
    }
    (l, h)
}

fn render_window(
    spec: &ModalitySpec,
    cfg: &GeneratorConfig,
    z: f64,
    phase: f64,
    shape: f64,
    rng: &mut impl Rng,
    out: &mut Vec<f32>,
) {
    let len = cfg.window_len;
    let (mid, half) = spec.mid_half();
    let noise_sd = spec.noise_std * half;
    let (band_lo, band_hi) = cfg.latent_band;
    let rel = if band_hi > band_lo {
        ((z - band_lo) / (band_hi - band_lo)).clamp(0.0, 1.0)
    } else {
        0.5
    };
    let (lo32, hi32) = f32_bounds(spec.amplitude_range.0, spec.amplitude_range.1);
    let noise = |rng: &mut dyn rand::RngCore| -> f64 {
        if noise_sd > 0.0 {
            let n: f64 = StandardNormal.sample(rng);
            noise_sd * n
        } else {
            0.0
        }
    };
    let wander = |rng: &mut dyn rand::RngCore, per_noise: f64| -> f64 {
        let bound = per_noise * spec.noise_std * half;
        if bound > 0.0 {
            rng.random_range(-bound..bound)
        } else {
            0.0
        }
    };
    let offset = wander(rng, OFFSET_PER_NOISE);
    let pos = |n: usize| {
        if len > 1 {
            2.0 * n as f64 / (len - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    match spec.kind {
        SignalKind::QuasiPeriodic | SignalKind::Spectrum => {
            let drift = wander(rng, DRIFT_PER_NOISE);
            for c in 0..spec.channels {
                for n in 0..len {
                    let t = n as f64 / cfg.fs;
                    let base = offset + drift * pos(n);
                    let v = harmonic_value(spec, z, phase, shape, c, t) + base + noise(rng);
                    out.push(v as f32);
                }
            }
        }
        SignalKind::Trend => {
            let slope = 0.75 * (2.0 * rel - 1.0);
            let bend = 0.7 * (2.0 * shape - 1.0);
            for _ in 0..spec.channels {
                for n in 0..len {
                    let x = pos(n);
                    let clean = slope * x + bend * (x * x - 1.0 / 3.0);
                    let v = mid + half * FILL * clean + offset + noise(rng);
                    out.push((v as f32).clamp(lo32, hi32));
                }
            }
        }
        SignalKind::Burst => {
            let rate = 1.0 + 4.0 * rel;
            let count = Poisson::new(rate).expect("positive rate").sample(rng) as usize;
            let width = (len as f64 / 16.0).max(1.0);
            let bursts: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..len as f64)).collect();
            let base = spec.amplitude_range.0 + 0.1 * half;
            let burst_sd = Normal::new(0.0, half * FILL * 0.5).expect("finite sd");
            for _ in 0..spec.channels {
                for n in 0..len {
                    let env: f64 = bursts
                        .iter()
                        .map(|&c| (-0.5 * ((n as f64 - c) / width).powi(2)).exp())
                        .sum();
                    let b: f64 = burst_sd.sample(rng);
                    let v = base + env * b.abs() + noise(rng);
                    out.push((v as f32).clamp(lo32, hi32));
                }
            }
        }
    }
}

/// Generate a dataset. Deterministic in `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<MultiModalDataset> {
    if cfg.modalities.is_empty() {
        return Err(Error::param("modalities: at least one modality is required"));
    }
    for (i, s) in cfg.modalities.iter().enumerate() {
        s.validate(i)?;
        if s.kind == SignalKind::Spectrum {
            return Err(Error::param(format!(
                "modalities[{i}].kind: spectrum modalities are derived, not generated"
            )));
        }
    }
    if cfg.n_windows == 0 {
        return Err(Error::param("n_windows must be >= 1"));
    }
    if cfg.window_len < 32 {
        return Err(Error::param("window_len must be >= 32"));
    }
    if !(cfg.fs > 0.0 && cfg.fs.is_finite()) {
        return Err(Error::param("fs must be positive"));
    }
    let (band_lo, band_hi) = cfg.latent_band;
    if !(band_lo > 0.0 && band_hi >= band_lo) {
        return Err(Error::param("latent_band needs 0 < low <= high"));
    }
    if let Task::Classification { n_classes } = cfg.task {
        if n_classes < 2 {
            return Err(Error::param("task.n_classes must be >= 2"));
        }
    }

    let n = cfg.n_windows;
    let mut z = Vec::with_capacity(n);
    let mut phase = Vec::with_capacity(n);
    let mut shape = Vec::with_capacity(n);
    for w in 0..n {
        let mut rng = rng_from(cfg.seed, &[0, w as u64]);
        z.push(if band_hi > band_lo {
            rng.random_range(band_lo..band_hi)
        } else {
            band_lo
        });
        phase.push(rng.random_range(0.0..2.0 * PI));
        shape.push(rng.random_range(0.0..1.0));
    }

    let windows = cfg
        .modalities
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            let mut out = Vec::with_capacity(n * spec.channels * cfg.window_len);
            for w in 0..n {
                let mut rng = rng_from(cfg.seed, &[1, w as u64, m as u64]);
                render_window(spec, cfg, z[w], phase[w], shape[w], &mut rng, &mut out);
            }
            out
        })
        .collect();

    let labels = match cfg.task {
        Task::Regression => Labels::Regression(z.iter().map(|&v| v as f32).collect()),
        Task::Classification { n_classes } => Labels::Classification {
            classes: quantile_buckets(&z, n_classes),
            n_classes,
        },
    };
    let mut ds = MultiModalDataset {
        fs: cfg.fs,
        window_len: cfg.window_len,
        modalities: cfg.modalities.clone(),
        windows,
        labels: Some(labels),
        latent: Some(Latent { z, phase, shape }),
        window_ids: (0..n).collect(),
    };
    if cfg.fourier_channels {
        ds = with_fourier_channels(&ds);
    }
    Ok(ds)
}

/// Class id of each value: the number of empirical quantile cut points at or
/// below it.
fn quantile_buckets(values: &[f64], n_classes: usize) -> Vec<u32> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..n_classes)
        .map(|k| sorted[(k * sorted.len() / n_classes).min(sorted.len() - 1)])
        .collect();
    values
        .iter()
        .map(|v| cuts.iter().filter(|&&c| c <= *v).count() as u32)
        .collect()
}

/// Append a magnitude-spectrum modality (`<name>_fft`) for every
/// quasi-periodic modality: each channel becomes `|DFT|` of the window.
pub fn with_fourier_channels(ds: &MultiModalDataset) -> MultiModalDataset {
    let mut out = ds.clone();
    let len = ds.window_len;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(len);
    for (m, spec) in ds.modalities.iter().enumerate() {
        if spec.kind != SignalKind::QuasiPeriodic {
            continue;
        }
        let mut values = Vec::with_capacity(ds.windows[m].len());
        let mut max_mag = 0.0f64;
        for row in ds.windows[m].chunks(len) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / len as f64;
            let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(f64::from(v) - mean, 0.0)).collect();
            fft.process(&mut buf);
            for c in &buf {
                let mag = c.norm() / len as f64;
                max_mag = max_mag.max(mag);
                values.push(mag as f32);
            }
        }
        out.modalities.push(ModalitySpec {
            name: format!("{}_fft", spec.name),
            channels: spec.channels,
            kind: SignalKind::Spectrum,
            amplitude_range: (0.0, max_mag.max(f64::MIN_POSITIVE) * 1.000_001),
            noise_std: 0.0,
        });
        out.windows.push(values);
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestModality {
    name: String,
    channels: usize,
    kind: SignalKind,
    amplitude_range: (f64, f64),
    noise_std: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    fs: f64,
    window_len: usize,
    n_windows: usize,
    modalities: Vec<ManifestModality>,
    label_kind: LabelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window_ids: Option<Vec<usize>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.bin";

/// Write `ds` as a directory: `manifest.json`, one `<modality>.bin` per
/// modality (little-endian f32, `[N x channels x window_len]`) and
/// `labels.bin` when labelled.
pub fn save(ds: &MultiModalDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    binio::ensure_dir(dir)?;
    let n = ds.n_windows();
    let identity = ds.window_ids.iter().enumerate().all(|(i, &w)| i == w);
    let manifest = Manifest {
        fs: ds.fs,
        window_len: ds.window_len,
        n_windows: n,
        modalities: ds
            .modalities
            .iter()
            .map(|s| ManifestModality {
                name: s.name.clone(),
                channels: s.channels,
                kind: s.kind,
                amplitude_range: s.amplitude_range,
                noise_std: s.noise_std,
            })
            .collect(),
        label_kind: ds.label_kind(),
        n_classes: match &ds.labels {
            Some(Labels::Classification { n_classes, .. }) => Some(*n_classes),
            _ => None,
        },
        window_ids: (!identity).then(|| ds.window_ids.clone()),
    };
    binio::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    for (spec, values) in ds.modalities.iter().zip(&ds.windows) {
        binio::write_f32(&dir.join(format!("{}.bin", spec.name)), values)?;
    }
    match &ds.labels {
        Some(Labels::Regression(v)) => binio::write_f32(&dir.join(LABELS_FILE), v)?,
        Some(Labels::Classification { classes, .. }) => {
            let v: Vec<f32> = classes.iter().map(|&c| c as f32).collect();
            binio::write_f32(&dir.join(LABELS_FILE), &v)?;
        }
        None => {}
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<MultiModalDataset> {
    if !dir.is_dir() {
        return Err(Error::format(
            "dataset",
            format!("{} is not a dataset directory", dir.display()),
        ));
    }
    let manifest: Manifest = binio::read_json(&dir.join(MANIFEST_FILE), MANIFEST_FILE)?;
    let n = manifest.n_windows;
    if !(manifest.fs > 0.0 && manifest.fs.is_finite()) {
        return Err(Error::format("fs", "must be a positive number"));
    }
    if manifest.window_len == 0 {
        return Err(Error::format("window_len", "must be >= 1"));
    }
    let mut modalities = Vec::new();
    let mut windows = Vec::new();
    for (i, m) in manifest.modalities.into_iter().enumerate() {
        let spec = ModalitySpec {
            name: m.name,
            channels: m.channels,
            kind: m.kind,
            amplitude_range: m.amplitude_range,
            noise_std: m.noise_std,
        };
        spec.validate(i)
            .map_err(|e| Error::format(format!("modalities[{i}]"), e.to_string()))?;
        let field = format!("modalities[{i}].channels ({}.bin)", spec.name);
        let values = binio::read_f32(
            &dir.join(format!("{}.bin", spec.name)),
            &field,
            n * spec.channels * manifest.window_len,
        )?;
        modalities.push(spec);
        windows.push(values);
    }
    if modalities.is_empty() {
        return Err(Error::format("modalities", "no modalities listed"));
    }
    let labels = match manifest.label_kind {
        LabelKind::None => None,
        LabelKind::Regression => Some(Labels::Regression(binio::read_f32(
            &dir.join(LABELS_FILE),
            LABELS_FILE,
            n,
        )?)),
        LabelKind::Classification => {
            let n_classes = manifest
                .n_classes
                .filter(|&c| c >= 2)
                .ok_or_else(|| Error::format("n_classes", "classification needs n_classes >= 2"))?;
            let raw = binio::read_f32(&dir.join(LABELS_FILE), LABELS_FILE, n)?;
            let mut classes = Vec::with_capacity(n);
            for (i, v) in raw.into_iter().enumerate() {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= n_classes {
                    return Err(Error::format(
                        LABELS_FILE,
                        format!("label {i} = {v} is not a class id below {n_classes}"),
                    ));
                }
                classes.push(v as u32);
            }
            Some(Labels::Classification { classes, n_classes })
        }
    };
    let window_ids = match manifest.window_ids {
        Some(ids) if ids.len() != n => {
            return Err(Error::format(
                "window_ids",
                format!("{} ids for {n} windows", ids.len()),
            ))
        }
        Some(ids) => ids,
        None => (0..n).collect(),
    };
    Ok(MultiModalDataset {
        fs: manifest.fs,
        window_len: manifest.window_len,
        modalities,
        windows,
        labels,
        latent: None,
        window_ids,
    })
}

/// Disjoint, exhaustive train/val/test split of the windows.
pub fn split(
    ds: &MultiModalDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(MultiModalDataset, MultiModalDataset, MultiModalDataset)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = ds.n_windows();
    let n_train = (a * n as f64).round() as usize;
    let n_val = (b * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::param(format!(
            "split of {n} windows by ({a}, {b}, {c}) leaves an empty part"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed, &[0x5911]));
    let (train, rest) = idx.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((ds.subset(train), ds.subset(val), ds.subset(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            seed,
            n_windows: 40,
            window_len: 64,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn zero_noise_is_exact_harmonic_sum() {
        let mut cfg = small(3);
        for m in &mut cfg.modalities {
            m.noise_std = 0.0;
        }
        cfg.latent_band = (2.0, 2.0);
        let ds = generate(&cfg).unwrap();
        let lat = ds.latent.as_ref().unwrap();
        assert!(lat.z.iter().all(|&z| z == 2.0));
        let spec = &ds.modalities[1];
        for w in [0, 17, 39] {
            let win = ds.window(1, w);
            for c in 0..spec.channels {
                for n in 0..64 {
                    let expected = harmonic_value(spec, 2.0, lat.phase[w], lat.shape[w], c, n as f64 / cfg.fs);
                    assert_eq!(win[c * 64 + n], expected as f32);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small(9)).unwrap();
        let b = generate(&small(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.latent, b.latent);
        let c = generate(&small(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn trend_stays_in_range() {
        let mut cfg = small(4);
        cfg.modalities[2].noise_std = 2.0;
        cfg.modalities
            .push(ModalitySpec::new("b", 2, SignalKind::Burst, (0.0, 1.0), 0.3));
        let ds = generate(&cfg).unwrap();
        for m in [2, 3] {
            let (lo, hi) = ds.modalities[m].amplitude_range;
            assert!(ds.windows[m].iter().all(|&v| f64::from(v) >= lo && f64::from(v) <= hi));
        }
    }

    #[test]
    fn empty_specs_rejected() {
        let mut cfg = small(1);
        cfg.modalities.clear();
        assert!(matches!(generate(&cfg), Err(Error::Parameter(_))));
        let mut cfg = small(1);
        cfg.modalities[0].channels = 0;
        let err = generate(&cfg).unwrap_err().to_string();
        assert!(err.contains("modalities[0].channels"), "{err}");
    }

    #[test]
    fn classification_buckets_are_balanced() {
        let mut cfg = small(5);
        cfg.n_windows = 200;
        cfg.task = Task::Classification { n_classes: 4 };
        let ds = generate(&cfg).unwrap();
        let Some(Labels::Classification { classes, .. }) = &ds.labels else {
            panic!("expected class labels");
        };
        for k in 0..4 {
            assert_eq!(classes.iter().filter(|&&c| c == k).count(), 50);
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let mut cfg = small(2);
        cfg.n_windows = 100;
        let ds = generate(&cfg).unwrap();
        let (tr, va, te) = split(&ds, (0.5, 0.25, 0.25), 1).unwrap();
        assert_eq!((tr.n_windows(), va.n_windows(), te.n_windows()), (50, 25, 25));
        let mut all: Vec<usize> = [&tr, &va, &te].iter().flat_map(|d| d.window_ids.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let again = split(&ds, (0.5, 0.25, 0.25), 1).unwrap();
        assert_eq!(again.0, tr);
        assert!(split(&ds, (0.999, 0.0005, 0.0005), 1).is_err());
        assert!(split(&ds, (0.5, 0.3, 0.3), 1).is_err());
    }

    #[test]
    fn fourier_modality_peaks_at_fundamental() {
        let mut cfg = small(6);
        cfg.window_len = 100;
        cfg.latent_band = (2.0, 2.0);
        cfg.fourier_channels = true;
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.n_modalities(), 5);
        assert_eq!(ds.modalities[3].name, "ppg_fft");
        let spec = ds.window(3, 0);
        let peak = (0..50).max_by(|&a, &b| spec[a].total_cmp(&spec[b])).unwrap();
        // 100 samples at 50 Hz -> 0.5 Hz bins
        assert_eq!(peak, 4);
    }
}
