//! Dataset container IO and the synthetic source/target generator.
//!
//! Container layout (one directory per domain):
//!
//! * `manifest.json`: `{"n", "d", "l", "k", "dtype": "f32le", "has_labels"}` and an optional `"domain_id"`
//! * `series.bin`: `n * d * l` little-endian `f32`, row-major `[n, d, l]`
//! * `labels.bin`: `n` little-endian `i64`, present iff `has_labels`

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelBatch, TimeSeriesBatch};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SERIES_FILE: &str = "series.bin";
pub const LABELS_FILE: &str = "labels.bin";

/// Which side of the transfer a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainRole {
    Source,
    Target,
    Unassigned,
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub series: TimeSeriesBatch,
    pub labels: Option<LabelBatch>,
    pub domain_id: String,
    pub num_classes: usize,
    pub role: DomainRole,
}

impl DomainDataset {
    pub fn new(
        series: TimeSeriesBatch,
        labels: Option<LabelBatch>,
        domain_id: impl Into<String>,
        num_classes: usize,
        role: DomainRole,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != series.batch_size() {
                return Err(Error::Shape(format!(
                    "{} labels for {} series",
                    l.len(),
                    series.batch_size()
                )));
            }
            if l.num_classes() != num_classes {
                return Err(Error::InvalidData(format!(
                    "label batch declares K = {} but dataset K = {num_classes}",
                    l.num_classes()
                )));
            }
        }
        Ok(Self {
            series,
            labels,
            domain_id: domain_id.into(),
            num_classes,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.series.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_role(mut self, role: DomainRole) -> Self {
        self.role = role;
        self
    }

    pub fn require_labels(&self) -> Result<&LabelBatch> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::InvalidData(format!("dataset '{}' has no labels", self.domain_id)))
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            series: self.series.select(indices)?,
            labels: self.labels.as_ref().map(|l| l.select(indices)).transpose()?,
            domain_id: self.domain_id.clone(),
            num_classes: self.num_classes,
            role: self.role,
        })
    }

    /// Seeded split into `(train, test)`; `test_fraction` of the instances (at least one
    /// on each side when `n >= 2`) go to the test part.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let (train, test) = split_indices(self.len(), test_fraction, seed)?;
        Ok((self.select(&train)?, self.select(&test)?))
    }
}

pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) || n < 2 {
        return Err(Error::Config(format!(
            "cannot split {n} instances with test fraction {test_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut test = idx.split_off(n - n_test);
    idx.sort_unstable();
    test.sort_unstable();
    Ok((idx, test))
}

/// Records every dataset path opened through the logged loaders. Cloning shares the log.
#[derive(Debug, Clone, Default)]
pub struct AccessLog(Arc<Mutex<Vec<PathBuf>>>);

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, path: &Path) {
        self.0.lock().expect("access log poisoned").push(path.to_path_buf());
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.0.lock().expect("access log poisoned").clone()
    }

    /// True if any recorded path lies under `root`.
    pub fn touched(&self, root: &Path) -> bool {
        let root = normalize(root);
        self.paths().iter().any(|p| normalize(p).starts_with(&root))
    }
}

fn normalize(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub d: usize,
    pub l: usize,
    pub k: usize,
    pub dtype: String,
    pub has_labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_id: Option<String>,
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    load_dataset_logged(path, &AccessLog::new())
}

pub fn load_dataset_logged(path: &Path, log: &AccessLog) -> Result<DomainDataset> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let p = path.join(name);
        log.record(&p);
        fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(p.clone()),
            _ => Error::io(&p, e),
        })
    };
    let manifest_path = path.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_slice(&read(MANIFEST_FILE)?).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.dtype != "f32le" {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported dtype '{}', expected f32le", manifest.dtype),
        ));
    }
    if manifest.n == 0 || manifest.d == 0 || manifest.l == 0 || manifest.k == 0 {
        return Err(Error::format(&manifest_path, "n, d, l and k must be positive"));
    }

    let bytes = read(SERIES_FILE)?;
    let expected = manifest.n * manifest.d * manifest.l * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path.join(SERIES_FILE),
            format!("{} bytes on disk, manifest implies {expected}", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let series = TimeSeriesBatch::from_vec(values, manifest.n, manifest.d, manifest.l)?;

    let labels = if manifest.has_labels {
        let bytes = read(LABELS_FILE)?;
        if bytes.len() != manifest.n * 8 {
            return Err(Error::format(
                path.join(LABELS_FILE),
                format!("{} bytes on disk, manifest implies {}", bytes.len(), manifest.n * 8),
            ));
        }
        let raw: Vec<i64> = bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let labels = raw
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                usize::try_from(y).ok().filter(|&y| y < manifest.k).ok_or_else(|| {
                    Error::InvalidData(format!("label {y} at position {i} is outside [0, {})", manifest.k))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(LabelBatch::new(labels, manifest.k)?)
    } else {
        None
    };

    let domain_id = manifest.domain_id.clone().unwrap_or_else(|| {
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    DomainDataset::new(series, labels, domain_id, manifest.k, DomainRole::Unassigned)
}

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let (n, d, l) = ds.series.dims();
    let manifest = Manifest {
        n,
        d,
        l,
        k: ds.num_classes,
        dtype: "f32le".into(),
        has_labels: ds.labels.is_some(),
        domain_id: Some(ds.domain_id.clone()),
    };
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = path.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write(MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    let series: Vec<u8> = ds.series.to_f32_vec()?.into_iter().flat_map(f32::to_le_bytes).collect();
    write(SERIES_FILE, &series)?;
    let labels_path = path.join(LABELS_FILE);
    match &ds.labels {
        Some(labels) => {
            let bytes: Vec<u8> = labels.labels().iter().flat_map(|&y| (y as i64).to_le_bytes()).collect();
            write(LABELS_FILE, &bytes)?;
        }
        None if labels_path.exists() => {
            fs::remove_file(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        }
        None => {}
    }
    Ok(())
}

/// Feature shift applied to the source templates to produce the target domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub amplitude_scale: f64,
    pub time_warp_strength: f64,
    pub noise_sigma: f64,
    pub channel_offset: f64,
    pub seed: u64,
}

impl ShiftConfig {
    pub fn identity(seed: u64) -> Self {
        Self {
            amplitude_scale: 1.0,
            time_warp_strength: 0.0,
            noise_sigma: 0.0,
            channel_offset: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.amplitude_scale.is_finite()
            && self.amplitude_scale > 0.0
            && self.time_warp_strength.is_finite()
            && self.time_warp_strength >= 0.0
            && self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0
            && self.channel_offset.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shift config {self:?}")))
        }
    }

    fn is_warping(&self) -> bool {
        self.time_warp_strength > 0.0
    }
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            amplitude_scale: 1.0,
            time_warp_strength: 0.3,
            noise_sigma: 0.3,
            channel_offset: 0.0,
            seed: 0,
        }
    }
}

/// Noise already present in the source domain.
const SOURCE_NOISE: f64 = 0.05;

/// Per-class base frequency in cycles per window.
fn class_frequency(class: usize) -> f64 {
    1.5 + 1.25 * class as f64
}

fn template(class: usize, t: f64, freq: f64, phase: f64) -> f64 {
    match class % 3 {
        0 => (2.0 * PI * freq * t + phase).sin(),
        1 => {
            let u = freq * t + phase / (2.0 * PI);
            2.0 * (u - u.floor()) - 1.0
        }
        _ => (2.0 * PI * (freq * t + 0.5 * freq * t * t) + phase).sin(),
    }
}

/// Smooth monotone map of `[0, 1]` onto itself: `t + a sin(pi t) / pi` with `|a| < 1`.
fn warp_time(t: f64, a: f64) -> f64 {
    t + a * (PI * t).sin() / PI
}

/// Draws a labelled source domain and its shifted, equally-labelled target.
///
/// Instance `i` has class `i % base_classes`. Source and target share every
/// per-instance draw (phase, frequency jitter, amplitude, intrinsic noise); the
/// target additionally gets a per-instance time warp, the amplitude scale, the
/// channel offset and extra Gaussian noise. The source never depends on the shift
/// parameters, only on `shift.seed`.
pub fn generate_synthetic_pair(
    base_classes: usize,
    n_per_class: usize,
    d: usize,
    l: usize,
    shift: &ShiftConfig,
) -> Result<(DomainDataset, DomainDataset)> {
    if base_classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if n_per_class < 1 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    if l < 16 {
        return Err(Error::Config(format!("series length {l} is below the minimum of 16")));
    }
    if d < 1 {
        return Err(Error::Config("at least one channel is required".into()));
    }
    shift.validate()?;

    let n = base_classes * n_per_class;
    let mut base_rng = ChaCha8Rng::seed_from_u64(shift.seed);
    let mut shift_rng = ChaCha8Rng::seed_from_u64(shift.seed ^ 0x5eed_5417_f00d_cafe);
    let strength = shift.time_warp_strength.min(0.95);

    let mut source = Vec::with_capacity(n * d * l);
    let mut target = Vec::with_capacity(n * d * l);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % base_classes;
        labels.push(class);
        let phase = base_rng.random_range(0.0..2.0 * PI);
        let freq = class_frequency(class) * base_rng.random_range(0.95..1.05);
        let amp = base_rng.random_range(0.8..1.2);
        let warp = strength * shift_rng.random_range(-1.0..=1.0f64);
        for ch in 0..d {
            let ch_phase = phase + 0.7 * ch as f64;
            let ch_amp = amp / (1.0 + 0.2 * ch as f64);
            for s in 0..l {
                let t = s as f64 / (l - 1) as f64;
                let intrinsic: f64 = SOURCE_NOISE * Distribution::<f64>::sample(&StandardNormal, &mut base_rng);
                let src = ch_amp * template(class, t, freq, ch_phase) + intrinsic;
                let tgt_clean = if shift.is_warping() {
                    ch_amp * template(class, warp_time(t, warp), freq, ch_phase) + intrinsic
                } else {
                    src
                };
                let extra: f64 = Distribution::<f64>::sample(&StandardNormal, &mut shift_rng);
                let tgt = shift.amplitude_scale * tgt_clean + shift.channel_offset + shift.noise_sigma * extra;
                source.push(src as f32);
                target.push(tgt as f32);
            }
        }
    }

    let labels = LabelBatch::new(labels, base_classes)?;
    let src = DomainDataset::new(
        TimeSeriesBatch::from_vec(source, n, d, l)?,
        Some(labels.clone()),
        "synthetic-source",
        base_classes,
        DomainRole::Source,
    )?;
    let tgt = DomainDataset::new(
        TimeSeriesBatch::from_vec(target, n, d, l)?,
        Some(labels),
        "synthetic-target",
        base_classes,
        DomainRole::Target,
    )?;
    Ok((src, tgt))
}
