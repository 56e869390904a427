//! Data model for multi-objective regression corpora.
//!
//! A [`Dataset`] is an ordered list of [`Sample`]s that share one feature
//! dimension `d` and one set of `K` named label dimensions. Datasets are
//! validated on construction and immutable afterwards; every transformation
//! (noise injection, splitting, subsetting) returns a new value.
//!
//! The on-disk format is JSON Lines: a manifest record followed by one
//! record per sample.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::util::{fraction_count, sample_normal, seeded_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    /// Ground-truth per-dimension corruption flags. Evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted: Option<Vec<bool>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, features: Vec<f64>, labels: Vec<f64>) -> Self {
        Sample {
            id: id.into(),
            features,
            labels,
            corrupted: None,
        }
    }

    pub fn is_corrupted(&self, dim: usize) -> bool {
        self.corrupted
            .as_ref()
            .is_some_and(|mask| mask.get(dim).copied().unwrap_or(false))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim_names: Vec<String>,
    feature_dim: usize,
    meta: Map<String, Value>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        dim_names: Vec<String>,
        feature_dim: usize,
        meta: Map<String, Value>,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        if dim_names.is_empty() {
            return Err(Error::InvalidConfig("at least one label dimension is required".into()));
        }
        let k = dim_names.len();
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    id: s.id.clone(),
                    what: "features",
                    expected: feature_dim,
                    found: s.features.len(),
                });
            }
            if s.labels.len() != k {
                return Err(Error::DimensionMismatch {
                    id: s.id.clone(),
                    what: "labels",
                    expected: k,
                    found: s.labels.len(),
                });
            }
            if let Some(mask) = &s.corrupted {
                if mask.len() != k {
                    return Err(Error::DimensionMismatch {
                        id: s.id.clone(),
                        what: "corrupted",
                        expected: k,
                        found: mask.len(),
                    });
                }
            }
            if !s.features.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    id: s.id.clone(),
                    what: "features",
                });
            }
            if !s.labels.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    id: s.id.clone(),
                    what: "labels",
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Dataset {
            samples,
            dim_names,
            feature_dim,
            meta,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn dim_names(&self) -> &[String] {
        &self.dim_names
    }

    pub fn n_dims(&self) -> usize {
        self.dim_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn meta(&self) -> &Map<String, Value> {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn label_column(&self, dim: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.labels[dim]).collect()
    }

    pub fn has_corruption_mask(&self) -> bool {
        self.samples.iter().any(|s| s.corrupted.is_some())
    }

    /// Corruption flags for one dimension; samples without a mask count as clean.
    pub fn corruption_column(&self, dim: usize) -> Vec<bool> {
        self.samples.iter().map(|s| s.is_corrupted(dim)).collect()
    }

    /// Row-major N×K corruption flags.
    pub fn corruption_rows(&self) -> Vec<Vec<bool>> {
        let k = self.n_dims();
        self.samples
            .iter()
            .map(|s| s.corrupted.clone().unwrap_or_else(|| vec![false; k]))
            .collect()
    }

    /// New dataset holding the samples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            dim_names: self.dim_names.clone(),
            feature_dim: self.feature_dim,
            meta: self.meta.clone(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: Value) -> Dataset {
        self.meta.insert(key.to_owned(), value);
        self
    }
}

/// Parameters of the linear-teacher synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub feature_dim: usize,
    pub n_dims: usize,
    /// Standard deviation of clean label noise, one per dimension. A single
    /// entry is broadcast to all dimensions.
    pub label_noise_sd: Vec<f64>,
    /// Multiplier on the teacher weights, bias and noise of each dimension.
    /// Empty means 1 everywhere.
    pub label_scale: Vec<f64>,
    /// Log-scale spread of a per-sample multiplier on the feature vector
    /// (`h = exp(σ·z) · g`). Zero gives plain i.i.d. standard normal features.
    pub feature_scale_sd: f64,
    pub teacher_seed: u64,
    pub sample_seed: u64,
    pub label_range: Option<(f64, f64)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 2000,
            feature_dim: 16,
            n_dims: 5,
            label_noise_sd: vec![0.1],
            label_scale: Vec::new(),
            feature_scale_sd: 0.0,
            teacher_seed: 7,
            sample_seed: 11,
            label_range: None,
        }
    }
}

impl SynthConfig {
    /// Default corpus with per-sample feature magnitudes spread by
    /// `exp(0.5·z)`, so samples differ in how strongly they move every head.
    pub fn heterogeneous() -> Self {
        SynthConfig {
            feature_scale_sd: 0.5,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.feature_dim == 0 || self.n_dims == 0 {
            return Err(Error::InvalidConfig(
                "n_samples, feature_dim and n_dims must be positive".into(),
            ));
        }
        for (name, v) in [
            ("label_noise_sd", &self.label_noise_sd),
            ("label_scale", &self.label_scale),
        ] {
            if !(v.is_empty() || v.len() == 1 || v.len() == self.n_dims) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must have 1 or {} entries, got {}",
                    self.n_dims,
                    v.len()
                )));
            }
        }
        if self.label_noise_sd.is_empty() {
            return Err(Error::InvalidConfig("label_noise_sd must not be empty".into()));
        }
        if self.label_noise_sd.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidConfig(
                "label_noise_sd entries must be finite and nonnegative".into(),
            ));
        }
        if self.label_scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidConfig("label_scale entries must be positive".into()));
        }
        if !(self.feature_scale_sd.is_finite() && self.feature_scale_sd >= 0.0) {
            return Err(Error::InvalidConfig("feature_scale_sd must be nonnegative".into()));
        }
        if let Some((lo, hi)) = self.label_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidConfig("label_range must satisfy lo < hi".into()));
            }
        }
        Ok(())
    }

    pub fn noise_sd(&self, dim: usize) -> f64 {
        broadcast(&self.label_noise_sd, dim, 0.0)
    }

    pub fn scale(&self, dim: usize) -> f64 {
        broadcast(&self.label_scale, dim, 1.0)
    }

    pub fn dim_names(&self) -> Vec<String> {
        (0..self.n_dims).map(|k| format!("dim{k}")).collect()
    }
}

fn broadcast(values: &[f64], dim: usize, default: f64) -> f64 {
    match values.len() {
        0 => default,
        1 => values[0],
        _ => values[dim],
    }
}

/// The linear model `y_k = W*_k · h + b*_k` behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl Teacher {
    pub fn from_config(config: &SynthConfig) -> Teacher {
        let mut rng = seeded_rng(config.teacher_seed, 0);
        let weights = (0..config.n_dims)
            .map(|k| {
                let scale = config.scale(k);
                (0..config.feature_dim)
                    .map(|_| scale * sample_normal(&mut rng))
                    .collect::<Vec<f64>>()
            })
            .collect();
        let biases = (0..config.n_dims)
            .map(|k| config.scale(k) * sample_normal(&mut rng))
            .collect::<Vec<f64>>();
        Teacher { weights, biases }
    }

    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| crate::util::dot(w, features) + b)
            .collect()
    }

    fn digest(rows: impl IntoIterator<Item = f64>) -> String {
        let mut hasher = Sha256::new();
        for v in rows {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn weights_digest(&self) -> String {
        Self::digest(self.weights.iter().flatten().copied())
    }

    pub fn biases_digest(&self) -> String {
        Self::digest(self.biases.iter().copied())
    }
}

/// Draws a corpus from a seeded linear teacher with Gaussian features and
/// per-dimension Gaussian label noise.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let teacher = Teacher::from_config(config);
    let mut feature_rng = seeded_rng(config.sample_seed, 0);
    let mut noise_rng = seeded_rng(config.sample_seed, 1);
    let mut scale_rng = seeded_rng(config.sample_seed, 2);
    let width = config.n_samples.to_string().len();

    let samples = (0..config.n_samples)
        .map(|i| {
            let mut features: Vec<f64> = (0..config.feature_dim)
                .map(|_| sample_normal(&mut feature_rng))
                .collect();
            if config.feature_scale_sd > 0.0 {
                let scale = (config.feature_scale_sd * sample_normal(&mut scale_rng)).exp();
                features.iter_mut().for_each(|v| *v *= scale);
            }
            let labels = teacher
                .predict(&features)
                .into_iter()
                .enumerate()
                .map(|(k, y)| {
                    let z = sample_normal(&mut noise_rng);
                    let y = y + config.scale(k) * config.noise_sd(k) * z;
                    match config.label_range {
                        Some((lo, hi)) => y.clamp(lo, hi),
                        None => y,
                    }
                })
                .collect();
            Sample {
                id: format!("s{i:0width$}"),
                features,
                labels,
                corrupted: Some(vec![false; config.n_dims]),
            }
        })
        .collect();

    let mut meta = Map::new();
    meta.insert("generator".into(), serde_json::to_value(config)?);
    meta.insert("teacher_seed".into(), json!(config.teacher_seed));
    meta.insert("sample_seed".into(), json!(config.sample_seed));
    meta.insert("teacher_weights_sha256".into(), json!(teacher.weights_digest()));
    meta.insert("teacher_biases_sha256".into(), json!(teacher.biases_digest()));
    Dataset::new(samples, config.dim_names(), config.feature_dim, meta)
}

/// Corrupts `ceil(rate * N)` labels in each selected dimension.
///
/// Each dimension draws its own sample subset (uniformly, without
/// replacement) and replaces those labels with uniform draws over the
/// dimension's clean `[min, max]`. Other dimensions are left bit-identical.
pub fn inject_dimension_noise(ds: &Dataset, rate: f64, dims: &[usize], seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("noise rate {rate} is outside [0, 1]")));
    }
    if dims.is_empty() {
        return Err(Error::InvalidArgument(
            "no dimensions selected for noise injection".into(),
        ));
    }
    let k_total = ds.n_dims();
    if let Some(&bad) = dims.iter().find(|&&k| k >= k_total) {
        return Err(Error::InvalidArgument(format!(
            "dimension {bad} out of range (K = {k_total})"
        )));
    }
    let mut unique = dims.to_vec();
    unique.sort_unstable();
    unique.dedup();

    let n = ds.len();
    let count = fraction_count(rate, n);
    let mut samples = ds.samples.clone();
    for s in &mut samples {
        s.corrupted.get_or_insert_with(|| vec![false; k_total]);
    }

    for &k in &unique {
        let clean = ds.label_column(k);
        let (lo, hi) = clean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let mut rng = seeded_rng(seed, k as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut chosen = order[..count].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            let replacement = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            samples[i].labels[k] = replacement;
            if let Some(mask) = samples[i].corrupted.as_mut() {
                mask[k] = true;
            }
        }
    }

    let mut meta = ds.meta.clone();
    let entry = json!({ "rate": rate, "dims": unique, "seed": seed });
    match meta.get_mut("noise_injections") {
        Some(Value::Array(list)) => list.push(entry),
        _ => {
            meta.insert("noise_injections".into(), Value::Array(vec![entry]));
        }
    }
    Dataset::new(samples, ds.dim_names.clone(), ds.feature_dim, meta)
}

/// Seeded partition into (train, val, test).
///
/// Val and test take `floor(f * N)` samples; train keeps the remainder. Each
/// part preserves the input order.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !f.is_finite() || *f < 0.0) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let n = ds.len();
    let n_val = (fv * n as f64 + 1e-9).floor() as usize;
    let n_test = (fs * n as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, 0));

    let mut val = order[..n_val].to_vec();
    let mut test = order[n_val..n_val + n_test].to_vec();
    let mut train = order[n_val + n_test..].to_vec();
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Manifest {
        feature_dim: usize,
        dim_names: Vec<String>,
        #[serde(default)]
        meta: Map<String, Value>,
    },
    Sample(Sample),
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let manifest = Record::Manifest {
        feature_dim: ds.feature_dim,
        dim_names: ds.dim_names.clone(),
        meta: ds.meta.clone(),
    };
    let io_err = |e| Error::io("<writer>", e);
    serde_json::to_writer(&mut out, &manifest)?;
    out.write_all(b"\n").map_err(io_err)?;
    for s in &ds.samples {
        serde_json::to_writer(&mut out, &Record::Sample(s.clone()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let reader = BufReader::new(input);
    let mut manifest = None;
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        match (record, manifest.is_some()) {
            (
                Record::Manifest {
                    feature_dim,
                    dim_names,
                    meta,
                },
                false,
            ) => {
                manifest = Some((feature_dim, dim_names, meta));
            }
            (Record::Manifest { .. }, true) => {
                return Err(Error::MalformedRecord {
                    line: line_no,
                    message: "second manifest record".into(),
                })
            }
            (Record::Sample(_), false) => {
                return Err(Error::MalformedRecord {
                    line: line_no,
                    message: "sample record before manifest".into(),
                })
            }
            (Record::Sample(s), true) => samples.push(s),
        }
    }
    let (feature_dim, dim_names, meta) = manifest.ok_or(Error::MalformedRecord {
        line: 1,
        message: "missing manifest record".into(),
    })?;
    Dataset::new(samples, dim_names, feature_dim, meta)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(ds, BufWriter::new(file))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file)
}
