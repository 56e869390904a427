#![allow(dead_code)]

use dimrisk::dataset::{Dataset, Sample};
use dimrisk::influence::SelfInfluenceTable;
use dimrisk::model::{RegressionHead, SharedLayer};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec_in<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random head over `d` inputs; `hidden = Some(m)` adds an `m × d` shared layer.
pub fn random_head<R: Rng>(rng: &mut R, k: usize, d: usize, hidden: Option<usize>) -> RegressionHead {
    let m = hidden.unwrap_or(d);
    RegressionHead {
        head_weights: (0..k).map(|_| vec_in(rng, m, 1.0)).collect(),
        head_biases: vec_in(rng, k, 1.0),
        shared_layer: hidden.map(|m| SharedLayer {
            weights: (0..m).map(|_| vec_in(rng, d, 1.0)).collect(),
            bias: vec_in(rng, m, 0.5),
        }),
    }
}

pub fn random_sample<R: Rng>(rng: &mut R, id: &str, d: usize, k: usize) -> Sample {
    Sample::new(id, vec_in(rng, d, 2.0), vec_in(rng, k, 3.0))
}

pub fn random_dataset<R: Rng>(rng: &mut R, n: usize, d: usize, k: usize) -> Dataset {
    let samples = (0..n).map(|i| random_sample(rng, &format!("r{i}"), d, k)).collect();
    Dataset::new(
        samples,
        (0..k).map(|j| format!("dim{j}")).collect(),
        d,
        Default::default(),
    )
    .unwrap()
}

pub fn table(rows: &[Vec<f64>]) -> SelfInfluenceTable {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    let scores = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    SelfInfluenceTable::new(scores, (0..n).map(|i| format!("s{i:03}")).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// Central differences of `f` around `theta`.
pub fn numeric_gradient(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let h = 1e-5 * theta[i].abs().max(1.0);
            x[i] = theta[i] + h;
            let up = f(&x);
            x[i] = theta[i] - h;
            let down = f(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `½ (f_k(h) − y_k)²` for the sample, as a function of the flat parameters.
pub fn dim_loss<'a>(
    head: &'a RegressionHead,
    scope: dimrisk::model::Scope,
    sample: &'a Sample,
    k: usize,
) -> impl Fn(&[f64]) -> f64 + 'a {
    move |flat: &[f64]| {
        let p = head.with_flat(scope, flat).predict(&sample.features).unwrap();
        0.5 * (p[k] - sample.labels[k]).powi(2)
    }
}
