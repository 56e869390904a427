//! Rank statistics and refinement analytics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::influence::SelfInfluenceTable;
use crate::model::RegressionHead;
use crate::refine::{ddp_select, PruneResult};
use crate::util::{fraction_count, top_indices};

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of average-tie ranks.
pub fn spearman(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "spearman inputs differ in length ({} vs {})",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Undefined(
            "spearman correlation needs at least two points".into(),
        ));
    }
    pearson(&average_ranks(pred), &average_ranks(target))
        .ok_or_else(|| Error::Undefined("spearman correlation of a constant vector".into()))
}

/// AUROC in the Mann–Whitney form: the probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!(
            "AUROC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let p = n_pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_dim_spearman: Vec<f64>,
    pub mean: f64,
    pub metadata: BTreeMap<String, Value>,
}

/// SHA-256 of a head's canonical JSON encoding.
pub fn head_digest(head: &RegressionHead) -> String {
    let text = serde_json::to_string(head).expect("heads always serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Per-dimension Spearman correlation between `head`'s predictions and the
/// labels of `ds`, pooled over all samples.
pub fn evaluate(head: &RegressionHead, ds: &Dataset) -> Result<MetricReport> {
    head.check_dataset(ds)?;
    let preds: Vec<Vec<f64>> = ds
        .samples()
        .iter()
        .map(|s| head.predict(&s.features))
        .collect::<Result<_>>()?;
    let per_dim_spearman = (0..ds.n_dims())
        .map(|k| {
            let p: Vec<f64> = preds.iter().map(|row| row[k]).collect();
            spearman(&p, &ds.label_column(k))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_dim_spearman.iter().sum::<f64>() / per_dim_spearman.len() as f64;
    let mut metadata = BTreeMap::new();
    metadata.insert("n_samples".into(), Value::from(ds.len()));
    metadata.insert("dim_names".into(), Value::from(ds.dim_names().to_vec()));
    metadata.insert("head_sha256".into(), Value::from(head_digest(head)));
    Ok(MetricReport {
        per_dim_spearman,
        mean,
        metadata,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCurve {
    /// Entry `j`: fraction of N removed by the union over `dim_order[..=j]`.
    pub cumulative_ratios: Vec<f64>,
    pub dim_order: Vec<usize>,
}

impl OverlapCurve {
    pub fn final_ratio(&self) -> f64 {
        self.cumulative_ratios.last().copied().unwrap_or(0.0)
    }

    /// CSV `j,ratio` with `j` counting included dimensions from 1.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let err = |e| Error::io("<csv>", e);
        writeln!(out, "j,ratio").map_err(err)?;
        for (j, r) in self.cumulative_ratios.iter().enumerate() {
            writeln!(out, "{},{}", j + 1, r).map_err(err)?;
        }
        out.flush().map_err(err)
    }
}

pub fn overlap_curve(scores: &SelfInfluenceTable, rho: f64, dim_order: &[usize]) -> Result<OverlapCurve> {
    let prune = ddp_select(scores, rho)?;
    OverlapCurve::from_prune(&prune, dim_order)
}

impl OverlapCurve {
    /// Cumulative union of the per-dimension risk sets of a DDP result.
    pub fn from_prune(prune: &PruneResult, dim_order: &[usize]) -> Result<OverlapCurve> {
        let k = prune.per_dim_risk_sets.len();
        let mut sorted = dim_order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..k).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!(
                "dim_order {dim_order:?} is not a permutation of 0..{k}"
            )));
        }
        let n = prune.n_samples().max(1) as f64;
        let mut union: HashSet<&str> = HashSet::new();
        let cumulative_ratios = dim_order
            .iter()
            .map(|&dim| {
                union.extend(prune.per_dim_risk_sets[dim].iter().map(String::as_str));
                union.len() as f64 / n
            })
            .collect();
        Ok(OverlapCurve {
            cumulative_ratios,
            dim_order: dim_order.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRecord {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub global: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityExport {
    pub dim_a: usize,
    pub dim_b: usize,
    pub records: Vec<ScatterRecord>,
    /// Correlations of the raw score columns; `None` if one is constant.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Set for each of (x, y, global) whose column was constant and so
    /// normalised to 0.
    pub degenerate: [bool; 3],
}

impl HeterogeneityExport {
    /// CSV `id,x,y,global`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let err = |e| Error::io("<csv>", e);
        writeln!(out, "id,x,y,global").map_err(err)?;
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.id, r.x, r.y, r.global).map_err(err)?;
        }
        out.flush().map_err(err)
    }
}

fn min_max(values: &[f64]) -> (Vec<f64>, bool) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // also catches empty input, where lo = +inf
    if hi <= lo {
        return (vec![0.0; values.len()], true);
    }
    (
        values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect(),
        false,
    )
}

/// Plot-ready scatter of two self-influence columns against a global score,
/// each min-max normalised to `[0, 1]`.
pub fn heterogeneity_export(
    scores: &SelfInfluenceTable,
    dim_a: usize,
    dim_b: usize,
    global_scores: &[f64],
) -> Result<HeterogeneityExport> {
    let k = scores.n_dims();
    if dim_a >= k || dim_b >= k {
        return Err(Error::InvalidArgument(format!("dimension out of range (K = {k})")));
    }
    if global_scores.len() != scores.n_samples() {
        return Err(Error::InvalidArgument(format!(
            "{} global scores for {} samples",
            global_scores.len(),
            scores.n_samples()
        )));
    }
    let a = scores.column(dim_a);
    let b = scores.column(dim_b);
    let (xs, dx) = min_max(&a);
    let (ys, dy) = min_max(&b);
    let (gs, dg) = min_max(global_scores);
    let records = scores
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| ScatterRecord {
            id: id.clone(),
            x: xs[i],
            y: ys[i],
            global: gs[i],
        })
        .collect();
    Ok(HeterogeneityExport {
        dim_a,
        dim_b,
        records,
        pearson: pearson(&a, &b),
        spearman: spearman(&a, &b).ok(),
        degenerate: [dx, dy, dg],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingEntry {
    pub dim: usize,
    pub risk_set_size: usize,
    /// Members of `R_k` absent from the global top set.
    pub masked: usize,
    /// How many masked members are truly corrupted in dimension `k`.
    pub masked_corrupted: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub rho: f64,
    pub per_dim: Vec<MaskingEntry>,
}

/// For each dimension, counts per-dimension high-risk samples that the
/// global top-`ρ` set (by `global_scores`) misses.
///
/// `corruption`, when given, is the row-major N×K ground-truth mask.
pub fn masking_report(
    scores: &SelfInfluenceTable,
    global_scores: &[f64],
    rho: f64,
    corruption: Option<&[Vec<bool>]>,
) -> Result<MaskingReport> {
    let n = scores.n_samples();
    if global_scores.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} global scores for {n} samples",
            global_scores.len()
        )));
    }
    if corruption.is_some_and(|c| c.len() != n) {
        return Err(Error::InvalidArgument(
            "corruption mask length differs from score table".into(),
        ));
    }
    let prune = ddp_select(scores, rho)?;
    let global_top: HashSet<usize> = top_indices(global_scores.iter().copied(), fraction_count(rho, n))
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = scores
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let per_dim = prune
        .per_dim_risk_sets
        .iter()
        .enumerate()
        .map(|(k, set)| {
            let masked: Vec<usize> = set
                .iter()
                .map(|id| index[id.as_str()])
                .filter(|i| !global_top.contains(i))
                .collect();
            MaskingEntry {
                dim: k,
                risk_set_size: set.len(),
                masked: masked.len(),
                masked_corrupted: corruption.map(|c| masked.iter().filter(|&&i| c[i][k]).count()),
            }
        })
        .collect();
    Ok(MaskingReport { rho, per_dim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn table(n: usize, k: usize, f: impl Fn(usize, usize) -> f64) -> SelfInfluenceTable {
        SelfInfluenceTable::new(DMatrix::from_fn(n, k, f), (0..n).map(|i| format!("s{i}")).collect()).unwrap()
    }

    #[test]
    fn spearman_hand_cases() {
        let v = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((v - 3.0 / 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn auroc_hand_cases() {
        let v = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(v, 0.75);
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(auroc(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn overlap_extremes() {
        let same = table(200, 5, |i, _| i as f64);
        let c = overlap_curve(&same, 0.05, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(c.cumulative_ratios, vec![0.05; 5]);
        // dimension k ranks block k highest
        let disjoint = table(
            200,
            5,
            |i, k| if i / 10 == k { 100.0 + i as f64 } else { (i % 7) as f64 },
        );
        let c = overlap_curve(&disjoint, 0.05, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(c.cumulative_ratios, vec![0.05, 0.10, 0.15, 0.20, 0.25]);
        assert!(overlap_curve(&disjoint, 0.05, &[0, 1, 1, 3, 4]).is_err());
    }

    #[test]
    fn heterogeneity_identity_pair() {
        let t = table(50, 2, |i, k| ((i * 37 + k * 11) % 50) as f64);
        let global: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let h = heterogeneity_export(&t, 1, 1, &global).unwrap();
        assert_eq!(h.spearman, Some(1.0));
        assert_eq!(h.records.len(), 50);
        assert!(h
            .records
            .iter()
            .all(|r| [r.x, r.y, r.global].iter().all(|v| (0.0..=1.0).contains(v))));
        let flat = heterogeneity_export(&table(5, 2, |_, _| 1.0), 0, 1, &[0.0; 5]).unwrap();
        assert_eq!(flat.degenerate, [true, true, true]);
        assert_eq!(flat.spearman, None);
    }

    #[test]
    fn masking_degenerate_cases() {
        let one = table(100, 1, |i, _| ((i * 13) % 100) as f64);
        let global = one.column(0);
        let r = masking_report(&one, &global, 0.1, None).unwrap();
        assert_eq!(r.per_dim[0].masked, 0);

        let t = table(100, 3, |i, k| ((i * (k + 3)) % 17) as f64);
        let global: Vec<f64> = (0..100).map(|i| (i % 5) as f64).collect();
        let r = masking_report(&t, &global, 1.0, None).unwrap();
        assert!(r.per_dim.iter().all(|e| e.masked == 0));
    }
}
