mod common;

use common::*;
use dimrisk::dataset::{generate_synthetic, inject_dimension_noise, Dataset, Sample, SynthConfig};
use dimrisk::eval::{heterogeneity_export, masking_report};
use dimrisk::influence::{
    disentangled_matrix, global_tracin_self, row_sum_scores, self_influence_closed_form, self_influence_explicit,
    InfluenceConfig,
};
use dimrisk::model::{fit_closed_form, per_dim_loss, RegressionHead, Scope, TrainConfig};
use dimrisk::pipeline::{run_pipeline, PipelineConfig, RefineStrategy};
use dimrisk::refine::{ddp_select, loss_prune_select};

fn probe_scores(ds: &Dataset) -> (RegressionHead, dimrisk::influence::SelfInfluenceTable) {
    let head = fit_closed_form(ds, None, &TrainConfig::default()).unwrap();
    let table = self_influence_closed_form(&head, ds, &InfluenceConfig::head_only()).unwrap();
    (head, table)
}

#[test]
fn global_and_row_sum_scores_reduce_to_the_diagonal_for_head_only() {
    let mut r = rng(10);
    let ds = random_dataset(&mut r, 40, 5, 3);
    let head = random_head(&mut r, 3, 5, None);
    let plain = InfluenceConfig::head_only();
    let s = self_influence_closed_form(&head, &ds, &plain).unwrap();
    let global = global_tracin_self(&head, &ds, &plain).unwrap();
    for (i, g) in global.iter().enumerate() {
        assert!(rel_err(*g, s.scores.row(i).sum()) <= 1e-10);
    }

    let lambda = vec![2.0, 0.0, 0.5];
    let weighted = InfluenceConfig {
        scope: Scope::HeadOnly,
        lambda: lambda.clone(),
    };
    let rows = row_sum_scores(&head, &ds, &weighted).unwrap();
    for i in 0..ds.len() {
        for k in 0..3 {
            let expected = lambda[k] * lambda[k] * s.scores[(i, k)];
            assert!((rows[(i, k)] - expected).abs() <= 1e-10 * expected.abs().max(1e-12));
        }
        assert_eq!(rows[(i, 1)], 0.0);
    }
}

#[test]
fn two_layer_row_sums_carry_off_diagonal_mass() {
    let mut r = rng(11);
    let ds = random_dataset(&mut r, 15, 4, 3);
    let head = random_head(&mut r, 3, 4, Some(3));
    let cfg = InfluenceConfig::with_scope(Scope::LastTwoLayers);
    let rows = row_sum_scores(&head, &ds, &cfg).unwrap();
    let explicit = self_influence_explicit(&head, &ds, &cfg).unwrap();
    let mut off_mass = 0.0f64;
    for (i, z) in ds.samples().iter().enumerate() {
        let m = disentangled_matrix(&head, z, z, &cfg).unwrap();
        for j in 0..3 {
            assert!(rel_err(m.phi[(j, j)], explicit.scores[(i, j)]) <= 1e-10);
            let entrywise: f64 = (0..3).map(|k| m.phi[(j, k)]).sum();
            assert!((rows[(i, j)] - entrywise).abs() <= 1e-12 * entrywise.abs().max(1.0));
            off_mass = off_mass.max((rows[(i, j)] - m.phi[(j, j)]).abs());
        }
    }
    assert!(off_mass > 1e-6);
}

#[test]
fn loss_ranking_and_influence_ranking_disagree_when_norms_vary() {
    // zero head: residual is minus the label; `a` has a small residual on a
    // large feature vector, `b` a large residual on a tiny one
    let samples = vec![
        Sample::new("a", vec![10.0], vec![1.0]),
        Sample::new("b", vec![0.0], vec![2.0]),
        Sample::new("c", vec![0.0], vec![0.5]),
        Sample::new("d", vec![0.0], vec![0.5]),
    ];
    let ds = Dataset::new(samples, vec!["y".into()], 1, Default::default()).unwrap();
    let head = RegressionHead::zeros(1, 1);
    let scores = self_influence_closed_form(&head, &ds, &InfluenceConfig::head_only()).unwrap();
    assert_eq!(scores.column(0), vec![101.0, 4.0, 0.25, 0.25]);
    let by_influence = ddp_select(&scores, 0.25).unwrap();
    let by_loss = loss_prune_select(&per_dim_loss(&head, &ds).unwrap(), 0.25).unwrap();
    assert_eq!(by_influence.removed_ids, vec!["a"]);
    assert_eq!(by_loss.removed_ids, vec!["b"]);
}

#[test]
fn independent_corruption_gives_weakly_related_dimensions() {
    let clean = generate_synthetic(&SynthConfig::default()).unwrap();
    let noisy = inject_dimension_noise(&clean, 0.1, &[0, 1, 2, 3, 4], 21).unwrap();
    let (head, table) = probe_scores(&noisy);
    let global = global_tracin_self(&head, &noisy, &InfluenceConfig::head_only()).unwrap();
    for a in 0..5 {
        for b in a + 1..5 {
            let export = heterogeneity_export(&table, a, b, &global).unwrap();
            let rho = export.spearman.unwrap();
            assert!(rho.abs() < 0.2, "dims {a},{b}: spearman {rho}");
        }
    }
}

#[test]
fn dominant_dimension_masks_the_others() {
    let clean = generate_synthetic(&SynthConfig {
        label_scale: vec![10.0, 1.0, 1.0, 1.0, 1.0],
        ..SynthConfig::heterogeneous()
    })
    .unwrap();
    let noisy = inject_dimension_noise(&clean, 0.1, &[0, 1, 2, 3, 4], 4).unwrap();
    let (head, table) = probe_scores(&noisy);
    let global = global_tracin_self(&head, &noisy, &InfluenceConfig::head_only()).unwrap();
    let report = masking_report(&table, &global, 0.005, Some(&noisy.corruption_rows())).unwrap();
    assert!(report.per_dim[1..].iter().any(|e| e.masked > 0));
    assert!(report.per_dim[1..].iter().map(|e| e.masked).sum::<usize>() > report.per_dim[0].masked);
}

fn small_pipeline(refine: RefineStrategy) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.synth.n_samples = 600;
    cfg.refine = refine;
    cfg
}

#[test]
fn zero_rho_pruning_reports_like_no_refinement() {
    let none = run_pipeline(&small_pipeline(RefineStrategy::None)).unwrap();
    let again = run_pipeline(&small_pipeline(RefineStrategy::None)).unwrap();
    assert_eq!(none, again);
    let ddp = run_pipeline(&small_pipeline(RefineStrategy::Ddp { rho: 0.0 })).unwrap();
    assert_eq!(ddp.metrics, none.metrics);
    assert_eq!(ddp.improvement, none.improvement);
    assert!(ddp.improvement.iter().all(|d| *d == 0.0));
    assert_eq!(ddp.noise_detection_auroc, none.noise_detection_auroc);
    assert_eq!(ddp.overlap, none.overlap);
    assert_eq!(ddp.masking, none.masking);
    assert_eq!(ddp.refinement.n_kept, none.refinement.n_kept);
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    for (refine, extra) in [
        (RefineStrategy::Ddp { rho: 0.1 }, ["prune.json", "prune.csv"]),
        (
            RefineStrategy::Ddr {
                temperature: 1.0,
                epsilon: 1e-8,
            },
            ["weights.json", "weights.csv"],
        ),
    ] {
        let mut cfg = small_pipeline(refine);
        let out = dir.path().join(refine.label());
        cfg.output_dir = Some(out.clone());
        run_pipeline(&cfg).unwrap();
        for name in [
            "dataset.jsonl",
            "train.jsonl",
            "val.jsonl",
            "test.jsonl",
            "probe_head.json",
            "refined_head.json",
            "scores.jsonl",
            "scores.csv",
            "report.json",
            "report.txt",
            "overlap.csv",
            "scatter.csv",
        ]
        .iter()
        .chain(&extra)
        {
            assert!(out.join(name).is_file(), "{} missing {name}", refine.label());
        }
    }
}
