mod common;

use common::*;
use dimrisk::influence::{
    disentangled_matrix, grad_per_dimension, gradient_assemblies, self_influence_closed_form, self_influence_explicit,
    InfluenceConfig,
};
use dimrisk::model::{Objective, Scope};
use nalgebra::DMatrix;

#[test]
fn per_dimension_gradients_match_finite_differences() {
    let mut r = rng(1);
    for (scope, hidden) in [
        (Scope::HeadOnly, None),
        (Scope::HeadOnly, Some(3)),
        (Scope::LastTwoLayers, Some(3)),
    ] {
        for trial in 0..5 {
            let head = random_head(&mut r, 3, 4, hidden);
            let sample = random_sample(&mut r, "x", 4, 3);
            let grads = grad_per_dimension(&head, &sample, &InfluenceConfig::with_scope(scope)).unwrap();
            let theta = head.flatten(scope);
            for (k, g) in grads.iter().enumerate() {
                let fd = numeric_gradient(&theta, dim_loss(&head, scope, &sample, k));
                let err = vec_rel_err(g, &fd);
                assert!(err <= 1e-5, "{scope} trial {trial} dim {k}: rel err {err}");
            }
        }
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let mut r = rng(2);
    for hidden in [None, Some(3)] {
        let ds = random_dataset(&mut r, 12, 4, 3);
        let head = random_head(&mut r, 3, 4, hidden);
        let weights = DMatrix::from_fn(12, 3, |i, k| 0.2 + ((i + 2 * k) % 5) as f64 * 0.3);
        let obj = Objective::new(&ds, Some(&weights), 0.7).unwrap();
        let lambda = [1.0, 0.4, 2.5];
        let scope = head.scope();
        let fd = numeric_gradient(&head.flatten(scope), |flat| {
            obj.value(&head.with_flat(scope, flat), &lambda)
        });
        let err = vec_rel_err(&obj.gradient(&head, &lambda), &fd);
        assert!(err <= 1e-5, "{scope}: rel err {err}");
    }
}

#[test]
fn closed_form_equals_explicit_squared_norms() {
    let mut r = rng(3);
    let ds = random_dataset(&mut r, 200, 6, 4);
    let head = random_head(&mut r, 4, 6, None);
    let cfg = InfluenceConfig::head_only();
    let closed = self_influence_closed_form(&head, &ds, &cfg).unwrap();
    let explicit = self_influence_explicit(&head, &ds, &cfg).unwrap();
    for (a, b) in closed.scores.iter().zip(explicit.scores.iter()) {
        assert!(rel_err(*a, *b) <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn closed_form_with_shared_layer_uses_embedding() {
    let mut r = rng(4);
    let ds = random_dataset(&mut r, 30, 5, 2);
    let head = random_head(&mut r, 2, 5, Some(3));
    let cfg = InfluenceConfig::head_only();
    let closed = self_influence_closed_form(&head, &ds, &cfg).unwrap();
    let explicit = self_influence_explicit(&head, &ds, &cfg).unwrap();
    for (a, b) in closed.scores.iter().zip(explicit.scores.iter()) {
        assert!(rel_err(*a, *b) <= 1e-10);
    }
}

#[test]
fn closed_form_never_builds_gradient_vectors() {
    let mut r = rng(5);
    let ds = random_dataset(&mut r, 50, 4, 3);
    let head = random_head(&mut r, 3, 4, None);
    let cfg = InfluenceConfig::head_only();
    let before = gradient_assemblies();
    self_influence_closed_form(&head, &ds, &cfg).unwrap();
    assert_eq!(gradient_assemblies(), before);
    self_influence_explicit(&head, &ds, &cfg).unwrap();
    assert_eq!(gradient_assemblies(), before + 50);
}

#[test]
fn two_layer_matrix_has_cross_terms_head_only_does_not() {
    let mut r = rng(6);
    let head = random_head(&mut r, 3, 4, Some(4));
    let a = random_sample(&mut r, "a", 4, 3);
    let b = random_sample(&mut r, "b", 4, 3);
    let diag = disentangled_matrix(&head, &a, &b, &InfluenceConfig::head_only()).unwrap();
    let full = disentangled_matrix(&head, &a, &b, &InfluenceConfig::with_scope(Scope::LastTwoLayers)).unwrap();
    let mut max_cross = 0.0f64;
    for j in 0..3 {
        for k in 0..3 {
            if j != k {
                assert_eq!(diag.phi[(j, k)], 0.0);
                max_cross = max_cross.max(full.phi[(j, k)].abs());
            }
        }
    }
    assert!(max_cross > 1e-6);
}
