//! Training-set refinement: dimension-disentangled pruning (DDP) and
//! reweighting (DDR), plus the loss-based and global-scalar pruning
//! baselines.
//!
//! All selections take the top `ceil(ρ·N)` scores of a column, breaking
//! ties by smaller sample index, so results are reproducible under ties.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::influence::SelfInfluenceTable;
use crate::model::LossTable;
use crate::util::{fraction_count, top_indices};

pub const DEFAULT_RHO: f64 = 0.005;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub kept_ids: Vec<String>,
    pub removed_ids: Vec<String>,
    pub kept_indices: Vec<usize>,
    pub removed_indices: Vec<usize>,
    /// `R_k`, highest score first. Empty for global pruning.
    pub per_dim_risk_sets: Vec<Vec<String>>,
    /// `τ_k`: smallest score inside `R_k`, `+∞` when `R_k` is empty.
    #[serde(serialize_with = "ser_thresholds", deserialize_with = "de_thresholds")]
    pub thresholds: Vec<f64>,
    pub rho: f64,
}

fn ser_thresholds<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
    // JSON has no infinity
    let mapped: Vec<Option<f64>> = values.iter().map(|v| v.is_finite().then_some(*v)).collect();
    mapped.serialize(s)
}

fn de_thresholds<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let raw = Vec::<Option<f64>>::deserialize(d)?;
    Ok(raw.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect())
}

impl PruneResult {
    pub fn n_samples(&self) -> usize {
        self.kept_ids.len() + self.removed_ids.len()
    }

    pub fn removal_ratio(&self) -> f64 {
        self.removed_ids.len() as f64 / self.n_samples().max(1) as f64
    }

    /// The kept part of `ds`, which must be the dataset the scores came from.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.len() != self.n_samples() {
            return Err(Error::InvalidArgument(format!(
                "prune result covers {} samples, dataset has {}",
                self.n_samples(),
                ds.len()
            )));
        }
        for (&i, id) in self.kept_indices.iter().zip(&self.kept_ids) {
            if ds.samples()[i].id != *id {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} is `{}` in the dataset but `{id}` in the prune result",
                    ds.samples()[i].id
                )));
            }
        }
        Ok(ds.subset(&self.kept_indices))
    }

    /// CSV `id,removed_by_dims`; one row per removed sample, dimensions
    /// joined by `;` (empty for global pruning).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let err = |e| Error::io("<csv>", e);
        let sets: Vec<BTreeSet<&str>> = self
            .per_dim_risk_sets
            .iter()
            .map(|set| set.iter().map(String::as_str).collect())
            .collect();
        writeln!(out, "id,removed_by_dims").map_err(err)?;
        for id in &self.removed_ids {
            let dims: Vec<String> = sets
                .iter()
                .enumerate()
                .filter(|(_, set)| set.contains(id.as_str()))
                .map(|(k, _)| k.to_string())
                .collect();
            writeln!(out, "{},{}", id, dims.join(";")).map_err(err)?;
        }
        out.flush().map_err(err)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("pruning ratio {rho} is outside [0, 1]")));
    }
    Ok(())
}

fn union_select(ids: &[String], scores: &DMatrix<f64>, rho: f64) -> Result<PruneResult> {
    check_rho(rho)?;
    let n = scores.nrows();
    let count = fraction_count(rho, n);
    let mut removed = vec![false; n];
    let mut risk_sets = Vec::with_capacity(scores.ncols());
    let mut thresholds = Vec::with_capacity(scores.ncols());
    for k in 0..scores.ncols() {
        let top = top_indices(scores.column(k).iter().copied(), count);
        thresholds.push(top.last().map_or(f64::INFINITY, |&i| scores[(i, k)]));
        for &i in &top {
            removed[i] = true;
        }
        risk_sets.push(top.iter().map(|&i| ids[i].clone()).collect());
    }
    Ok(partition(ids, &removed, risk_sets, thresholds, rho))
}

fn partition(
    ids: &[String],
    removed: &[bool],
    per_dim_risk_sets: Vec<Vec<String>>,
    thresholds: Vec<f64>,
    rho: f64,
) -> PruneResult {
    let (removed_indices, kept_indices): (Vec<usize>, Vec<usize>) = (0..ids.len()).partition(|&i| removed[i]);
    PruneResult {
        kept_ids: kept_indices.iter().map(|&i| ids[i].clone()).collect(),
        removed_ids: removed_indices.iter().map(|&i| ids[i].clone()).collect(),
        kept_indices,
        removed_indices,
        per_dim_risk_sets,
        thresholds,
        rho,
    }
}

/// DDP: union of the per-dimension top-`ρ` self-influence sets.
pub fn ddp_select(scores: &SelfInfluenceTable, rho: f64) -> Result<PruneResult> {
    union_select(&scores.sample_ids, &scores.scores, rho)
}

/// Baseline: the same union rule ranked by per-dimension loss.
pub fn loss_prune_select(losses: &LossTable, rho: f64) -> Result<PruneResult> {
    union_select(&losses.sample_ids, &losses.values, rho)
}

/// Baseline: removes the top `ceil(ρ_total·N)` samples by a scalar score.
pub fn global_prune_select(ids: &[String], scalar_scores: &[f64], rho_total: f64) -> Result<PruneResult> {
    check_rho(rho_total)?;
    if ids.len() != scalar_scores.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ids for {} scores",
            ids.len(),
            scalar_scores.len()
        )));
    }
    let count = fraction_count(rho_total, ids.len());
    let mut removed = vec![false; ids.len()];
    for i in top_indices(scalar_scores.iter().copied(), count) {
        removed[i] = true;
    }
    Ok(partition(ids, &removed, Vec::new(), Vec::new(), rho_total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    /// N×K, strictly positive, global mean 1.
    pub weights: DMatrix<f64>,
    pub temperature: f64,
    pub epsilon: f64,
    /// `(μ_k, σ_k)` of each score column.
    pub per_dim_stats: Vec<(f64, f64)>,
    pub sample_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct WeightDocument {
    temperature: f64,
    epsilon: f64,
    per_dim_stats: Vec<(f64, f64)>,
    sample_ids: Vec<String>,
    weights: Vec<Vec<f64>>,
}

impl WeightMatrix {
    pub fn to_json(&self) -> Result<String> {
        let doc = WeightDocument {
            temperature: self.temperature,
            epsilon: self.epsilon,
            per_dim_stats: self.per_dim_stats.clone(),
            sample_ids: self.sample_ids.clone(),
            weights: self.weights.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WeightDocument = serde_json::from_str(text)?;
        let k = doc.per_dim_stats.len();
        if doc.weights.len() != doc.sample_ids.len() || doc.weights.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(
                "weight matrix shape does not match its ids and stats".into(),
            ));
        }
        let flat: Vec<f64> = doc.weights.into_iter().flatten().collect();
        Ok(WeightMatrix {
            weights: DMatrix::from_row_slice(doc.sample_ids.len(), k, &flat),
            temperature: doc.temperature,
            epsilon: doc.epsilon,
            per_dim_stats: doc.per_dim_stats,
            sample_ids: doc.sample_ids,
        })
    }

    /// CSV `id,dim,weight`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let err = |e| Error::io("<csv>", e);
        writeln!(out, "id,dim,weight").map_err(err)?;
        for (i, id) in self.sample_ids.iter().enumerate() {
            for k in 0..self.weights.ncols() {
                writeln!(out, "{},{},{}", id, k, self.weights[(i, k)]).map_err(err)?;
            }
        }
        out.flush().map_err(err)
    }

    pub fn global_mean(&self) -> f64 {
        self.weights.mean()
    }
}

/// DDR: per-dimension z-score, sigmoid decay `1 / (1 + exp(Ŝ/τ))`, then one
/// global rescale so the mean weight over all N·K entries is 1.
///
/// A constant column has no ranking information and gets `Ŝ = 0`. Raw
/// weights that underflow (`Ŝ/τ` above ~709) are floored at the smallest
/// positive normal float so no sample is silenced outright.
pub fn ddr_weights(scores: &SelfInfluenceTable, temperature: f64, epsilon: f64) -> Result<WeightMatrix> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (n, k) = scores.scores.shape();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot reweight an empty score table".into()));
    }
    let mut raw = DMatrix::zeros(n, k);
    let mut stats = Vec::with_capacity(k);
    for j in 0..k {
        let col = scores.scores.column(j);
        let mu = col.mean();
        let sigma = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
        let constant = col.max() == col.min();
        stats.push((mu, sigma));
        for i in 0..n {
            let z = if constant {
                0.0
            } else {
                (col[i] - mu) / (sigma + epsilon)
            };
            raw[(i, j)] = (1.0 / (1.0 + (z / temperature).exp())).max(f64::MIN_POSITIVE);
        }
    }
    let mean = raw.mean();
    Ok(WeightMatrix {
        weights: raw / mean,
        temperature,
        epsilon,
        per_dim_stats: stats,
        sample_ids: scores.sample_ids.clone(),
    })
}
