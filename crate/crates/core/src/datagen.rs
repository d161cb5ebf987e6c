//! Synthetic noisy datasets with recorded ground truth, vector augmentations
//! and the square-root class-balancing sampler.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{MoproError, Result};
use crate::numkit::{Rng, Tensor};
use crate::settings::{Entry, SettingsWriter};

pub const DATASET_MAGIC: &[u8; 4] = b"MPDS";
pub const DATASET_VERSION: u16 = 1;
/// `true_label` value stored for out-of-distribution samples.
pub const OOD_MARKER: u32 = u32::MAX;

const CENTROID_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const HOLDOUT_STREAM: u64 = 2;
const SAMPLER_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    /// Wrong labels drawn uniformly from the other K−1 classes.
    Uniform,
    /// Class k is mislabelled as k+1 (mod K).
    Pairwise,
}

impl std::str::FromStr for NoiseKind {
    type Err = MoproError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseKind::Uniform),
            "pairwise" => Ok(NoiseKind::Pairwise),
            other => Err(MoproError::config(
                "noise_kind",
                format!("`{other}` is not one of uniform|pairwise"),
            )),
        }
    }
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::Pairwise => "pairwise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub input_dim: usize,
    /// Slots per class; each slot independently becomes an OOD sample with
    /// probability `ood_rate`, so `n = classes · samples_per_class`.
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation of the class centroids.
    pub centroid_scale: f64,
    /// Per-coordinate standard deviation within a class.
    pub cluster_spread: f64,
    /// OOD cloud spread as a multiple of `cluster_spread`.
    pub ood_spread_factor: f64,
    pub noise_rate: f64,
    pub ood_rate: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 10,
            input_dim: 32,
            samples_per_class: 500,
            centroid_scale: 1.0,
            cluster_spread: 1.0,
            ood_spread_factor: 4.0,
            noise_rate: 0.4,
            ood_rate: 0.1,
            noise_kind: NoiseKind::Uniform,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(MoproError::config("classes", "need at least 2 classes"));
        }
        if self.input_dim == 0 {
            return Err(MoproError::config("input_dim", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(MoproError::config(
                "noise_rate",
                format!("{} is outside the valid range [0, 1]", self.noise_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.ood_rate) {
            return Err(MoproError::config(
                "ood_rate",
                format!("{} is outside the valid range [0, 1)", self.ood_rate),
            ));
        }
        for (name, v) in [
            ("centroid_scale", self.centroid_scale),
            ("cluster_spread", self.cluster_spread),
            ("ood_spread_factor", self.ood_spread_factor),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(MoproError::config(name, format!("{v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Class centroids, `classes × input_dim`.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        let mut rng = Rng::with_stream(self.seed, CENTROID_STREAM);
        (0..self.classes)
            .map(|_| {
                (0..self.input_dim)
                    .map(|_| self.centroid_scale * rng.normal())
                    .collect()
            })
            .collect()
    }

    /// Writes the `[dataset]` section.
    pub fn write_settings(&self, w: &mut SettingsWriter) {
        w.section("dataset")
            .kv("classes", self.classes)
            .kv("input_dim", self.input_dim)
            .kv("samples_per_class", self.samples_per_class)
            .kv("centroid_scale", self.centroid_scale)
            .kv("cluster_spread", self.cluster_spread)
            .kv("ood_spread_factor", self.ood_spread_factor)
            .kv("noise_rate", self.noise_rate)
            .kv("ood_rate", self.ood_rate)
            .kv("noise_kind", self.noise_kind.as_str())
            .kv("seed", self.seed);
    }

    /// Apply one entry. Returns `Ok(false)` for entries outside `[dataset]`.
    pub fn apply_entry(&mut self, e: &Entry) -> Result<bool> {
        if e.section != "dataset" {
            return Ok(false);
        }
        match e.key.as_str() {
            "classes" => self.classes = e.parse()?,
            "input_dim" => self.input_dim = e.parse()?,
            "samples_per_class" => self.samples_per_class = e.parse()?,
            "centroid_scale" => self.centroid_scale = e.parse()?,
            "cluster_spread" => self.cluster_spread = e.parse()?,
            "ood_spread_factor" => self.ood_spread_factor = e.parse()?,
            "noise_rate" => self.noise_rate = e.parse()?,
            "ood_rate" => self.ood_rate = e.parse()?,
            "noise_kind" => self.noise_kind = e.parse()?,
            "seed" => self.seed = e.parse()?,
            _ => return Err(e.unknown()),
        }
        Ok(true)
    }

    fn grand_mean(centroids: &[Vec<f64>]) -> Vec<f64> {
        let k = centroids.len() as f64;
        let d = centroids[0].len();
        (0..d)
            .map(|j| centroids.iter().map(|c| c[j]).sum::<f64>() / k)
            .collect()
    }
}

/// Features plus `(true_label, noisy_label, is_ood)` for every sample.
/// Labels are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub classes: usize,
    pub input_dim: usize,
    pub noise_rate: f64,
    pub ood_rate: f64,
    pub seed: u64,
    /// Row-major `n × input_dim`.
    pub features: Vec<f64>,
    /// The label the learner sees.
    pub noisy_label: Vec<usize>,
    /// `None` for OOD samples.
    pub true_label: Vec<Option<usize>>,
    pub is_ood: Vec<bool>,
}

impl NoisyDataset {
    pub fn len(&self) -> usize {
        self.noisy_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_label.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn features_tensor(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.input_dim);
        for &i in idx {
            data.extend_from_slice(self.feature(i));
        }
        Tensor::from_vec(idx.len(), self.input_dim, data)
    }

    /// In-distribution sample whose given label differs from the truth.
    pub fn is_corrupted(&self, i: usize) -> bool {
        matches!(self.true_label[i], Some(t) if t != self.noisy_label[i])
    }

    pub fn corrupted_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_corrupted(i)).count()
    }

    pub fn ood_count(&self) -> usize {
        self.is_ood.iter().filter(|&&b| b).count()
    }

    /// Indices of samples with a true class.
    pub fn in_distribution(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_ood[i]).collect()
    }

    fn check_consistency(&self) -> Result<()> {
        let n = self.len();
        if self.features.len() != n * self.input_dim
            || self.true_label.len() != n
            || self.is_ood.len() != n
        {
            return Err(MoproError::Structural("dataset arrays have unequal lengths".into()));
        }
        for i in 0..n {
            if self.noisy_label[i] >= self.classes {
                return Err(MoproError::Structural(format!(
                    "sample {i}: noisy label {} out of range",
                    self.noisy_label[i]
                )));
            }
            match (self.true_label[i], self.is_ood[i]) {
                (None, true) => {}
                (Some(t), false) if t < self.classes => {}
                _ => {
                    return Err(MoproError::Structural(format!(
                        "sample {i}: true label and OOD flag disagree"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u16(DATASET_VERSION);
        w.u64(self.classes as u64);
        w.u64(self.input_dim as u64);
        w.u64(self.len() as u64);
        w.f64(self.noise_rate);
        w.f64(self.ood_rate);
        w.u64(self.seed);
        w.f64s(&self.features);
        self.noisy_label.iter().for_each(|&y| w.u32(y as u32));
        self.true_label
            .iter()
            .for_each(|t| w.u32(t.map_or(OOD_MARKER, |t| t as u32)));
        self.is_ood.iter().for_each(|&b| w.u8(b as u8));
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let version = r.u16("format version")?;
        if version != DATASET_VERSION {
            return Err(MoproError::Parse {
                offset: 4,
                msg: format!("unsupported dataset version {version} (expected {DATASET_VERSION})"),
            });
        }
        let classes = r.len("class count")?;
        let input_dim = r.len("input dimension")?;
        let n = r.len("sample count")?;
        let noise_rate = r.f64("noise rate")?;
        let ood_rate = r.f64("ood rate")?;
        let seed = r.u64("seed")?;
        let feature_count = n
            .checked_mul(input_dim)
            .ok_or_else(|| r.err("feature block size overflows"))?;
        let features = r.f64s(feature_count, "feature block")?;
        let mut noisy_label = Vec::with_capacity(n);
        for _ in 0..n {
            noisy_label.push(r.u32("noisy label block")? as usize);
        }
        let mut true_label = Vec::with_capacity(n);
        for _ in 0..n {
            let t = r.u32("true label block")?;
            true_label.push((t != OOD_MARKER).then_some(t as usize));
        }
        let mut is_ood = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            is_ood.push(match r.u8("ood flag block")? {
                0 => false,
                1 => true,
                v => {
                    return Err(MoproError::Parse {
                        offset: at,
                        msg: format!("ood flag {v} is not 0 or 1"),
                    })
                }
            });
        }
        if !r.is_at_end() {
            return Err(r.err("trailing bytes after dataset"));
        }
        let ds = NoisyDataset {
            classes,
            input_dim,
            noise_rate,
            ood_rate,
            seed,
            features,
            noisy_label,
            true_label,
            is_ood,
        };
        ds.check_consistency()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| MoproError::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MoproError::file(path, e))?;
        NoisyDataset::from_bytes(&bytes)
    }
}

fn wrong_label(kind: NoiseKind, truth: usize, classes: usize, rng: &mut Rng) -> usize {
    match kind {
        NoiseKind::Uniform => {
            let r = rng.below(classes - 1);
            if r >= truth {
                r + 1
            } else {
                r
            }
        }
        NoiseKind::Pairwise => (truth + 1) % classes,
    }
}

fn draw_around(center: &[f64], spread: f64, rng: &mut Rng, out: &mut Vec<f64>) {
    out.extend(center.iter().map(|c| c + spread * rng.normal()));
}

/// Generate the training set described by `config`. Pure in `config`.
pub fn generate(config: &DatasetConfig) -> Result<NoisyDataset> {
    config.validate()?;
    let centroids = config.centroids();
    let center = DatasetConfig::grand_mean(&centroids);
    let ood_spread = config.ood_spread_factor * config.cluster_spread;
    let mut rng = Rng::with_stream(config.seed, TRAIN_STREAM);

    let n = config.classes * config.samples_per_class;
    let mut ds = NoisyDataset {
        classes: config.classes,
        input_dim: config.input_dim,
        noise_rate: config.noise_rate,
        ood_rate: config.ood_rate,
        seed: config.seed,
        features: Vec::with_capacity(n * config.input_dim),
        noisy_label: Vec::with_capacity(n),
        true_label: Vec::with_capacity(n),
        is_ood: Vec::with_capacity(n),
    };
    for slot in 0..n {
        if rng.bernoulli(config.ood_rate) {
            draw_around(&center, ood_spread, &mut rng, &mut ds.features);
            ds.noisy_label.push(rng.below(config.classes));
            ds.true_label.push(None);
            ds.is_ood.push(true);
        } else {
            let k = slot % config.classes;
            draw_around(&centroids[k], config.cluster_spread, &mut rng, &mut ds.features);
            let y = if rng.bernoulli(config.noise_rate) {
                wrong_label(config.noise_kind, k, config.classes, &mut rng)
            } else {
                k
            };
            ds.noisy_label.push(y);
            ds.true_label.push(Some(k));
            ds.is_ood.push(false);
        }
    }
    Ok(ds)
}

/// Clean, OOD-free samples from the same class centroids, drawn from an
/// independent stream. Used as a held-out probe set.
pub fn generate_holdout(config: &DatasetConfig, per_class: usize) -> Result<NoisyDataset> {
    config.validate()?;
    let centroids = config.centroids();
    let mut rng = Rng::with_stream(config.seed, HOLDOUT_STREAM);
    let n = config.classes * per_class;
    let mut features = Vec::with_capacity(n * config.input_dim);
    let mut labels = Vec::with_capacity(n);
    for slot in 0..n {
        let k = slot % config.classes;
        draw_around(&centroids[k], config.cluster_spread, &mut rng, &mut features);
        labels.push(k);
    }
    Ok(NoisyDataset {
        classes: config.classes,
        input_dim: config.input_dim,
        noise_rate: 0.0,
        ood_rate: 0.0,
        seed: config.seed,
        features,
        true_label: labels.iter().map(|&k| Some(k)).collect(),
        noisy_label: labels,
        is_ood: vec![false; n],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Parametric stand-in for image augmentation:
/// `out_j = mask_j · scale_j · x_j + σ·ε_j` with `mask_j ~ Bernoulli(1−dropout)`,
/// `scale_j ~ U(scale.0, scale.1)` and `ε_j ~ N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub sigma: f64,
    pub dropout: f64,
    pub scale: (f64, f64),
}

impl AugmentPolicy {
    pub fn weak(sigma: f64) -> Self {
        AugmentPolicy {
            kind: AugmentKind::Weak,
            sigma,
            dropout: 0.0,
            scale: (1.0, 1.0),
        }
    }

    pub fn strong(sigma: f64, dropout: f64, scale: (f64, f64)) -> Self {
        AugmentPolicy {
            kind: AugmentKind::Strong,
            sigma,
            dropout,
            scale,
        }
    }

    pub fn identity() -> Self {
        AugmentPolicy::weak(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(MoproError::config("augment.sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MoproError::config("augment.dropout", "must be in [0, 1)"));
        }
        if !(self.scale.0 <= self.scale.1) || !(self.scale.0 >= 0.0) {
            return Err(MoproError::config(
                "augment.scale",
                "need 0 <= low <= high",
            ));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.sigma == 0.0 && self.dropout == 0.0 && self.scale == (1.0, 1.0)
    }

    /// Mean of the multiplicative factor applied to each coordinate.
    pub fn expected_gain(&self) -> f64 {
        (1.0 - self.dropout) * 0.5 * (self.scale.0 + self.scale.1)
    }
}

pub fn augment(x: &[f64], policy: &AugmentPolicy, rng: &mut Rng) -> Vec<f64> {
    if policy.is_identity() {
        return x.to_vec();
    }
    let fixed_scale = policy.scale.0 == policy.scale.1;
    x.iter()
        .map(|&v| {
            let keep = policy.dropout == 0.0 || !rng.bernoulli(policy.dropout);
            let s = if fixed_scale {
                policy.scale.0
            } else {
                rng.uniform_range(policy.scale.0, policy.scale.1)
            };
            let noise = if policy.sigma > 0.0 {
                policy.sigma * rng.normal()
            } else {
                0.0
            };
            if keep {
                v * s + noise
            } else {
                noise
            }
        })
        .collect()
}

/// Augment every row of a batch.
pub fn augment_batch(batch: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Tensor {
    let mut out = Vec::with_capacity(batch.len());
    for row in batch.row_iter() {
        out.extend(augment(row, policy, rng));
    }
    Tensor::from_vec(batch.rows(), batch.cols(), out)
}

/// Infinite stream of positions into a label list, where each position is
/// drawn with weight `1/√n_k` for its class `k`. Class `k` therefore
/// receives probability mass proportional to `√n_k`.
#[derive(Debug, Clone)]
pub struct SqrtSampler {
    cumulative: Vec<f64>,
    rng: Rng,
}

impl SqrtSampler {
    pub fn new(labels: &[usize], seed: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(MoproError::Init("square-root sampler needs at least one label".into()));
        }
        let classes = labels.iter().max().copied().unwrap_or(0) + 1;
        let mut counts = vec![0usize; classes];
        labels.iter().for_each(|&k| counts[k] += 1);
        let mut acc = 0.0;
        let cumulative = labels
            .iter()
            .map(|&k| {
                acc += 1.0 / (counts[k] as f64).sqrt();
                acc
            })
            .collect();
        Ok(SqrtSampler {
            cumulative,
            rng: Rng::with_stream(seed, SAMPLER_STREAM),
        })
    }

    /// Sampling probability of each class present in `labels`.
    pub fn class_probabilities(labels: &[usize]) -> Vec<f64> {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; classes];
        labels.iter().for_each(|&k| counts[k] += 1);
        let mass: Vec<f64> = counts.iter().map(|&c| (c as f64).sqrt()).collect();
        let total: f64 = mass.iter().sum();
        mass.into_iter().map(|m| m / total).collect()
    }
}

impl Iterator for SqrtSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let total = *self.cumulative.last().expect("non-empty");
        let u = self.rng.uniform() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        Some(i.min(self.cumulative.len() - 1))
    }
}
