//! End-to-end refinement experiment.
//!
//! generate → inject noise → split → probe fit → self-influence →
//! refine → refit → evaluate against clean test labels.
//!
//! Every number in the [`ExperimentReport`] is a deterministic function of
//! the [`PipelineConfig`]; the report carries the config for provenance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{generate_synthetic, inject_dimension_noise, save_dataset, split, Dataset, SynthConfig};
use crate::error::Error;
use crate::eval::{
    auroc, evaluate, head_digest, heterogeneity_export, masking_report, overlap_curve, MaskingReport, MetricReport,
    OverlapCurve,
};
use crate::influence::{global_tracin_self, self_influence, InfluenceConfig, SelfInfluenceTable};
use crate::model::{fit_head, per_dim_loss, save_head, RegressionHead, Scope, Strategy, TrainConfig};
use crate::refine::{
    ddp_select, ddr_weights, global_prune_select, loss_prune_select, PruneResult, WeightMatrix, DEFAULT_EPSILON,
    DEFAULT_RHO, DEFAULT_TEMPERATURE,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T> Stage<T> for crate::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub rate: f64,
    pub dims: Vec<usize>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            rate: 0.1,
            dims: vec![0, 1, 2, 3, 4],
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum RefineStrategy {
    None,
    Ddp {
        #[serde(default = "default_rho")]
        rho: f64,
    },
    Ddr {
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    LossPrune {
        #[serde(default = "default_rho")]
        rho: f64,
    },
    GlobalPrune {
        #[serde(default = "default_rho")]
        rho_total: f64,
    },
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for RefineStrategy {
    fn default() -> Self {
        RefineStrategy::Ddp { rho: DEFAULT_RHO }
    }
}

impl RefineStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            RefineStrategy::None => "none",
            RefineStrategy::Ddp { .. } => "ddp",
            RefineStrategy::Ddr { .. } => "ddr",
            RefineStrategy::LossPrune { .. } => "loss_prune",
            RefineStrategy::GlobalPrune { .. } => "global_prune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: (0.7, 0.1, 0.2),
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Per-dimension ratio for the overlap curve and masking report.
    pub rho: f64,
    /// Dimension pair for the heterogeneity scatter.
    pub scatter_dims: (usize, usize),
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            rho: DEFAULT_RHO,
            scatter_dims: (0, 1),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub noise: NoiseConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub influence: InfluenceConfig,
    pub refine: RefineStrategy,
    pub analysis: AnalysisConfig,
    /// Where intermediate artifacts go; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> crate::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes to toml")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementSummary {
    pub strategy: String,
    pub n_train: usize,
    /// Samples left after pruning (`n_train` for reweighting).
    pub n_kept: usize,
    pub removed_ids: Vec<String>,
    /// Ground-truth corrupted entries among the removed samples, per dimension.
    pub removed_corrupted: Vec<usize>,
    pub weight_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub dim_names: Vec<String>,
    pub split_sizes: (usize, usize, usize),
    pub probe_sha256: String,
    /// Keyed by `baseline` (equal weighting, unrefined) and `refined`.
    pub metrics: BTreeMap<String, MetricReport>,
    /// `refined − baseline` Spearman per dimension.
    pub improvement: Vec<f64>,
    pub validation: Option<MetricReport>,
    /// Per-dimension AUROC of self-influence against the training
    /// corruption mask; `None` where the dimension has a single class.
    pub noise_detection_auroc: Vec<Option<f64>>,
    pub refinement: RefinementSummary,
    pub overlap: OverlapCurve,
    pub masking: MaskingReport,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

enum Refinement {
    Unchanged,
    Pruned(PruneResult),
    Weighted(WeightMatrix),
}

/// Clean labels for the samples of `part`, looked up by id.
fn with_clean_labels(part: &Dataset, clean: &Dataset) -> crate::Result<Dataset> {
    let index: BTreeMap<&str, usize> = clean
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let picks: Vec<usize> = part.samples().iter().map(|s| index[s.id.as_str()]).collect();
    Ok(clean.subset(&picks))
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<ExperimentReport, PipelineError> {
    let clean = generate_synthetic(&config.synth).stage("generate")?;
    let noisy = if config.noise.rate > 0.0 && !config.noise.dims.is_empty() {
        inject_dimension_noise(&clean, config.noise.rate, &config.noise.dims, config.noise.seed).stage("inject")?
    } else {
        clean.clone()
    };
    let (train, val, test) = split(&noisy, config.split.fractions, config.split.seed).stage("split")?;
    info!(
        "split sizes: train {} val {} test {}",
        train.len(),
        val.len(),
        test.len()
    );

    // probe checkpoint: equal weighting on the full training split
    let mut probe_cfg = config.train.clone();
    probe_cfg.strategy = Strategy::Equal;
    if config.influence.scope == Scope::HeadOnly {
        probe_cfg.hidden_dim = None;
    }
    let probe = fit_head(&train, None, &probe_cfg).stage("probe")?;
    let scores = self_influence(&probe, &train, &config.influence).stage("score")?;

    let refinement = match config.refine {
        RefineStrategy::None => Refinement::Unchanged,
        RefineStrategy::Ddp { rho } => Refinement::Pruned(ddp_select(&scores, rho).stage("refine")?),
        RefineStrategy::Ddr { temperature, epsilon } => {
            Refinement::Weighted(ddr_weights(&scores, temperature, epsilon).stage("refine")?)
        }
        RefineStrategy::LossPrune { rho } => {
            let losses = per_dim_loss(&probe, &train).stage("refine")?;
            Refinement::Pruned(loss_prune_select(&losses, rho).stage("refine")?)
        }
        RefineStrategy::GlobalPrune { rho_total } => {
            let global = global_tracin_self(&probe, &train, &config.influence).stage("refine")?;
            Refinement::Pruned(global_prune_select(&train.ids(), &global, rho_total).stage("refine")?)
        }
    };

    let baseline_cfg = TrainConfig {
        strategy: Strategy::Equal,
        hidden_dim: None,
        ..config.train.clone()
    };
    let baseline = fit_head(&train, None, &baseline_cfg).stage("refit")?;
    let refined = match &refinement {
        Refinement::Unchanged => fit_head(&train, None, &config.train),
        Refinement::Pruned(p) => p.apply(&train).and_then(|kept| fit_head(&kept, None, &config.train)),
        Refinement::Weighted(w) => fit_head(&train, Some(&w.weights), &config.train),
    }
    .stage("refit")?;

    let clean_test = with_clean_labels(&test, &clean).stage("evaluate")?;
    let base_metrics = evaluate(&baseline, &clean_test).stage("evaluate")?;
    let refined_metrics = evaluate(&refined, &clean_test).stage("evaluate")?;
    let validation = if val.len() >= 2 {
        Some(evaluate(&refined, &with_clean_labels(&val, &clean).stage("evaluate")?).stage("evaluate")?)
    } else {
        None
    };
    let improvement = refined_metrics
        .per_dim_spearman
        .iter()
        .zip(&base_metrics.per_dim_spearman)
        .map(|(r, b)| r - b)
        .collect();

    let noise_detection_auroc = (0..train.n_dims())
        .map(|k| auroc(&scores.column(k), &train.corruption_column(k)).ok())
        .collect();
    let all_dims: Vec<usize> = (0..train.n_dims()).collect();
    let overlap = overlap_curve(&scores, config.analysis.rho, &all_dims).stage("analysis")?;
    let global = global_tracin_self(&probe, &train, &config.influence).stage("analysis")?;
    let corruption = train.corruption_rows();
    let masking = masking_report(&scores, &global, config.analysis.rho, Some(&corruption)).stage("analysis")?;

    let refinement_summary = summarize(config.refine.label(), &train, &refinement);
    let mut metrics = BTreeMap::new();
    metrics.insert("baseline".to_owned(), base_metrics);
    metrics.insert("refined".to_owned(), refined_metrics);
    let report = ExperimentReport {
        tool_version: TOOL_VERSION.to_owned(),
        config: config.clone(),
        dim_names: train.dim_names().to_vec(),
        split_sizes: (train.len(), val.len(), test.len()),
        probe_sha256: head_digest(&probe),
        metrics,
        improvement,
        validation,
        noise_detection_auroc,
        refinement: refinement_summary,
        overlap,
        masking,
    };

    if let Some(dir) = &config.output_dir {
        let artifacts = Artifacts {
            noisy: &noisy,
            train: &train,
            val: &val,
            test: &test,
            probe: &probe,
            refined: &refined,
            scores: &scores,
            global: &global,
            refinement: &refinement,
            report: &report,
        };
        artifacts.write(dir).stage("write")?;
    }
    Ok(report)
}

fn summarize(label: &str, train: &Dataset, refinement: &Refinement) -> RefinementSummary {
    let k = train.n_dims();
    let mut summary = RefinementSummary {
        strategy: label.to_owned(),
        n_train: train.len(),
        n_kept: train.len(),
        removed_ids: Vec::new(),
        removed_corrupted: vec![0; k],
        weight_range: None,
    };
    match refinement {
        Refinement::Unchanged => {}
        Refinement::Pruned(p) => {
            summary.n_kept = p.kept_ids.len();
            summary.removed_ids = p.removed_ids.clone();
            for &i in &p.removed_indices {
                for (dim, count) in summary.removed_corrupted.iter_mut().enumerate() {
                    *count += train.samples()[i].is_corrupted(dim) as usize;
                }
            }
        }
        Refinement::Weighted(w) => summary.weight_range = Some((w.weights.min(), w.weights.max())),
    }
    summary
}

struct Artifacts<'a> {
    noisy: &'a Dataset,
    train: &'a Dataset,
    val: &'a Dataset,
    test: &'a Dataset,
    probe: &'a RegressionHead,
    refined: &'a RegressionHead,
    scores: &'a SelfInfluenceTable,
    global: &'a [f64],
    refinement: &'a Refinement,
    report: &'a ExperimentReport,
}

pub(crate) fn create(path: &Path) -> crate::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> crate::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Artifacts<'_> {
    fn write(&self, dir: &Path) -> crate::Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_dataset(self.noisy, dir.join("dataset.jsonl"))?;
        save_dataset(self.train, dir.join("train.jsonl"))?;
        save_dataset(self.val, dir.join("val.jsonl"))?;
        save_dataset(self.test, dir.join("test.jsonl"))?;
        save_head(self.probe, dir.join("probe_head.json"))?;
        save_head(self.refined, dir.join("refined_head.json"))?;
        self.scores.write_jsonl(create(&dir.join("scores.jsonl"))?)?;
        self.scores.write_csv(create(&dir.join("scores.csv"))?)?;
        match self.refinement {
            Refinement::Unchanged => {}
            Refinement::Pruned(p) => {
                write_text(&dir.join("prune.json"), &serde_json::to_string_pretty(p)?)?;
                p.write_csv(create(&dir.join("prune.csv"))?)?;
            }
            Refinement::Weighted(w) => {
                write_text(&dir.join("weights.json"), &w.to_json()?)?;
                w.write_csv(create(&dir.join("weights.csv"))?)?;
            }
        }
        write_report(self.report, Some(self.scores), Some(self.global), dir)
    }
}

/// Writes `report.json`, `report.txt` and the plot-ready CSV exports.
pub fn write_report(
    report: &ExperimentReport,
    scores: Option<&SelfInfluenceTable>,
    global: Option<&[f64]>,
    dir: &Path,
) -> crate::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("report.json"), &report.to_json())?;
    write_text(&dir.join("report.txt"), &render_text(report))?;
    report.overlap.write_csv(create(&dir.join("overlap.csv"))?)?;
    if let (Some(scores), Some(global)) = (scores, global) {
        let (a, b) = report.config.analysis.scatter_dims;
        if a < scores.n_dims() && b < scores.n_dims() {
            heterogeneity_export(scores, a, b, global)?.write_csv(create(&dir.join("scatter.csv"))?)?;
        }
    }
    Ok(())
}

fn fmt_row(values: impl IntoIterator<Item = String>) -> String {
    values
        .into_iter()
        .map(|v| format!("{v:>10}"))
        .collect::<Vec<_>>()
        .join("")
}

/// Human-readable summary of an experiment report.
pub fn render_text(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let names = &report.dim_names;
    let _ = writeln!(out, "dimrisk {} experiment report", report.tool_version);
    let (tr, va, te) = report.split_sizes;
    let _ = writeln!(out, "split: train {tr}, val {va}, test {te}");
    let _ = writeln!(out, "refinement: {}", report.refinement.strategy);
    let _ = writeln!(
        out,
        "kept {} of {} training samples",
        report.refinement.n_kept, report.refinement.n_train
    );
    if let Some((lo, hi)) = report.refinement.weight_range {
        let _ = writeln!(out, "weight range: [{lo:.4}, {hi:.4}]");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Spearman x100 on clean test labels");
    let _ = writeln!(out, "{:<12}{}{:>10}", "", fmt_row(names.iter().cloned()), "mean");
    for (label, m) in &report.metrics {
        let _ = writeln!(
            out,
            "{:<12}{}{:>10.2}",
            label,
            fmt_row(m.per_dim_spearman.iter().map(|v| format!("{:.2}", 100.0 * v))),
            100.0 * m.mean
        );
    }
    let _ = writeln!(
        out,
        "{:<12}{}",
        "delta",
        fmt_row(report.improvement.iter().map(|v| format!("{:+.2}", 100.0 * v)))
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "noise detection AUROC x100");
    let _ = writeln!(
        out,
        "{:<12}{}",
        "",
        fmt_row(report.noise_detection_auroc.iter().map(|v| match v {
            Some(a) => format!("{:.2}", 100.0 * a),
            None => "n/a".into(),
        }))
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "cumulative removal ratio (%) at rho = {}",
        report.config.analysis.rho
    );
    let _ = writeln!(
        out,
        "{:<12}{}",
        "",
        fmt_row(
            report
                .overlap
                .cumulative_ratios
                .iter()
                .map(|v| format!("{:.2}", 100.0 * v))
        )
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "masked high-risk samples (missed by global ranking)");
    for e in &report.masking.per_dim {
        let name = names.get(e.dim).map_or("?", String::as_str);
        let corrupted = e.masked_corrupted.map_or(String::new(), |c| format!(", {c} corrupted"));
        let _ = writeln!(out, "  {name}: {} of {}{corrupted}", e.masked, e.risk_set_size);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        PipelineConfig {
            synth: SynthConfig {
                n_samples: 300,
                feature_dim: 6,
                n_dims: 3,
                ..SynthConfig::default()
            },
            noise: NoiseConfig {
                rate: 0.1,
                dims: vec![0, 2],
                seed: 5,
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = small();
        cfg.refine = RefineStrategy::Ddr {
            temperature: 0.5,
            epsilon: 1e-8,
        };
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = PipelineConfig::from_toml("[refine]\nstrategy = \"ddp\"\n").unwrap();
        assert_eq!(partial.refine, RefineStrategy::Ddp { rho: 0.005 });
    }

    #[test]
    fn undetectable_dimensions_report_none() {
        let report = run_pipeline(&small()).unwrap();
        assert!(report.noise_detection_auroc[0].is_some());
        assert!(report.noise_detection_auroc[1].is_none());
        assert!(render_text(&report).contains("n/a"));
    }

    #[test]
    fn stage_is_named_in_errors() {
        let mut cfg = small();
        cfg.noise.rate = 2.0;
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, "inject");
        let mut cfg = small();
        cfg.influence.scope = Scope::LastTwoLayers;
        assert_eq!(run_pipeline(&cfg).unwrap_err().stage, "score");
    }

    #[test]
    fn two_layer_scope_runs_with_hidden_layer() {
        let mut cfg = small();
        cfg.influence.scope = Scope::LastTwoLayers;
        cfg.train.hidden_dim = Some(4);
        cfg.train.epochs = 50;
        cfg.refine = RefineStrategy::Ddp { rho: 0.05 };
        let report = run_pipeline(&cfg).unwrap();
        assert!(report.refinement.n_kept < report.refinement.n_train);
    }
}
