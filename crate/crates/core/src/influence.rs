//! Disentangled influence under the identity-Hessian approximation.
//!
//! For a head `θ` and per-dimension losses `L_k = ½ r_k²`:
//!
//! * `φ_jk(z, z') = λ_j λ_k ⟨∇L_j(z'), ∇L_k(z)⟩` is the K×K disentangled
//!   influence matrix of training sample `z` on test sample `z'`;
//! * the scalar influence `⟨∇Σλ_j L_j(z'), ∇Σλ_k L_k(z)⟩` equals `Σ_jk φ_jk`;
//! * the dimension-specific self-influence `S_k(z) = ‖∇L_k(z)‖²` is the
//!   λ-free diagonal of `φ(z, z)`.
//!
//! Self-influence tables never carry λ factors; the matrix, scalar and
//! row-sum scores always do.

use std::cell::Cell;
use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{resolve_lambda, RegressionHead, Scope};
use crate::util::dot;

/// Hessian approximation used by every score in this module.
pub const HESSIAN: &str = "identity";

/// Environment variable selecting `sequential` (default) or `parallel`
/// per-sample scoring. Both produce bit-identical results.
pub const SCORING_ENV: &str = "DIMRISK_SCORING";

thread_local! {
    static GRADIENT_ASSEMBLIES: Cell<u64> = const { Cell::new(0) };
}

/// Number of scope-sized gradient buffers assembled on the current thread.
pub fn gradient_assemblies() -> u64 {
    GRADIENT_ASSEMBLIES.with(Cell::get)
}

fn parallel_scoring() -> bool {
    std::env::var(SCORING_ENV).is_ok_and(|v| v.eq_ignore_ascii_case("parallel"))
}

fn map_samples<T, F>(ds: &Dataset, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Sample) -> Result<T> + Sync,
{
    if parallel_scoring() {
        ds.samples().par_iter().map(&f).collect()
    } else {
        ds.samples().iter().map(&f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfluenceConfig {
    pub scope: Scope,
    /// Empty means all ones.
    pub lambda: Vec<f64>,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            scope: Scope::HeadOnly,
            lambda: Vec::new(),
        }
    }
}

impl InfluenceConfig {
    pub fn head_only() -> Self {
        Self::default()
    }

    pub fn with_scope(scope: Scope) -> Self {
        InfluenceConfig {
            scope,
            ..Self::default()
        }
    }

    fn lambda_for(&self, n_dims: usize) -> Result<Vec<f64>> {
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidConfig("lambda entries must be nonnegative".into()));
        }
        resolve_lambda(&self.lambda, n_dims)
    }

    fn check(&self, head: &RegressionHead) -> Result<()> {
        if !head.supports(self.scope) {
            return Err(Error::ScopeMismatch {
                scope: self.scope.to_string(),
                reason: "head has no shared layer".into(),
            });
        }
        Ok(())
    }
}

fn check_sample(head: &RegressionHead, sample: &Sample) -> Result<()> {
    if sample.features.len() != head.input_dim() {
        return Err(Error::DimensionMismatch {
            id: sample.id.clone(),
            what: "features",
            expected: head.input_dim(),
            found: sample.features.len(),
        });
    }
    if sample.labels.len() != head.n_dims() {
        return Err(Error::DimensionMismatch {
            id: sample.id.clone(),
            what: "labels",
            expected: head.n_dims(),
            found: sample.labels.len(),
        });
    }
    Ok(())
}

/// `∇_θ L_k(z)` for every dimension `k`, flattened over `cfg.scope` in
/// [`RegressionHead::flatten`] layout.
pub fn grad_per_dimension(head: &RegressionHead, sample: &Sample, cfg: &InfluenceConfig) -> Result<Vec<Vec<f64>>> {
    cfg.check(head)?;
    check_sample(head, sample)?;
    let scope = cfg.scope;
    let u = head.embed(&sample.features);
    let pred = head.predict_embedded(&u);
    let m = head.embed_dim();
    let d = head.input_dim();
    let len = head.scope_len(scope);

    let grads = (0..head.n_dims())
        .map(|k| {
            let r = pred[k] - sample.labels[k];
            let mut g = vec![0.0; len];
            let off = head.head_offset(scope, k);
            for j in 0..m {
                g[off + j] = r * u[j];
            }
            g[off + m] = r;
            if scope == Scope::LastTwoLayers {
                let w = &head.head_weights[k];
                for row in 0..m {
                    let back = r * w[row];
                    for c in 0..d {
                        g[row * d + c] = back * sample.features[c];
                    }
                    g[m * d + row] = back;
                }
            }
            g
        })
        .collect();
    GRADIENT_ASSEMBLIES.with(|c| c.set(c.get() + 1));
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfInfluenceTable {
    /// N×K, all entries nonnegative.
    pub scores: DMatrix<f64>,
    pub scope: Scope,
    pub lambda: Vec<f64>,
    pub sample_ids: Vec<String>,
}

impl SelfInfluenceTable {
    pub fn new(scores: DMatrix<f64>, sample_ids: Vec<String>) -> Result<Self> {
        if scores.nrows() != sample_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} score rows for {} ids",
                scores.nrows(),
                sample_ids.len()
            )));
        }
        if scores.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "self-influence scores must be finite and nonnegative".into(),
            ));
        }
        Ok(SelfInfluenceTable {
            lambda: vec![1.0; scores.ncols()],
            scores,
            scope: Scope::HeadOnly,
            sample_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.scores.ncols()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.scores.column(k).iter().copied().collect()
    }

    /// CSV with header `id,dim,score`, one row per (sample, dimension).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let err = |e| Error::io("<csv>", e);
        writeln!(out, "id,dim,score").map_err(err)?;
        for (i, id) in self.sample_ids.iter().enumerate() {
            for k in 0..self.n_dims() {
                writeln!(out, "{},{},{}", id, k, self.scores[(i, k)]).map_err(err)?;
            }
        }
        out.flush().map_err(err)
    }

    /// JSON Lines: a header record, then `{"id":..,"scores":[..]}` per sample.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let err = |e| Error::io("<jsonl>", e);
        let header = TableRecord::Header {
            scope: self.scope,
            lambda: self.lambda.clone(),
            hessian: HESSIAN.into(),
            n_dims: self.n_dims(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(err)?;
        for (i, id) in self.sample_ids.iter().enumerate() {
            let row = TableRecord::Row {
                id: id.clone(),
                scores: self.scores.row(i).iter().copied().collect(),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n").map_err(err)?;
        }
        out.flush().map_err(err)
    }

    pub fn read_jsonl<R: Read>(input: R) -> Result<Self> {
        let mut header = None;
        let mut ids = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        for (idx, line) in BufReader::new(input).lines().enumerate() {
            let line = line.map_err(|e| Error::io("<jsonl>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| Error::MalformedRecord { line: idx + 1, message };
            let record: TableRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            match record {
                TableRecord::Header {
                    scope, lambda, n_dims, ..
                } if header.is_none() => {
                    header = Some((scope, lambda, n_dims));
                }
                TableRecord::Row { id, scores } => {
                    let Some((_, _, n_dims)) = &header else {
                        return Err(malformed("score row before header".into()));
                    };
                    if scores.len() != *n_dims {
                        return Err(Error::DimensionMismatch {
                            id,
                            what: "scores",
                            expected: *n_dims,
                            found: scores.len(),
                        });
                    }
                    ids.push(id);
                    rows.extend(scores);
                }
                TableRecord::Header { .. } => return Err(malformed("second header record".into())),
            }
        }
        let (scope, lambda, n_dims) = header.ok_or(Error::MalformedRecord {
            line: 1,
            message: "missing header record".into(),
        })?;
        let scores = DMatrix::from_row_slice(ids.len(), n_dims, &rows);
        let mut table = SelfInfluenceTable::new(scores, ids)?;
        table.scope = scope;
        table.lambda = lambda;
        Ok(table)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum TableRecord {
    Header {
        scope: Scope,
        lambda: Vec<f64>,
        hessian: String,
        n_dims: usize,
    },
    Row {
        id: String,
        scores: Vec<f64>,
    },
}

/// `S_ik = r_ik² · (‖u_i‖² + 1)` from forward-pass quantities only.
///
/// `u_i` is the vector the heads read (the raw features for a head-only
/// model); the `+1` is the bias coordinate. Costs O(N·(d + K)) and never
/// assembles a gradient.
pub fn self_influence_closed_form(
    head: &RegressionHead,
    ds: &Dataset,
    cfg: &InfluenceConfig,
) -> Result<SelfInfluenceTable> {
    if cfg.scope != Scope::HeadOnly {
        return Err(Error::ScopeMismatch {
            scope: cfg.scope.to_string(),
            reason: "the closed form covers the output heads only".into(),
        });
    }
    head.check_dataset(ds)?;
    let k = head.n_dims();
    let rows = map_samples(ds, |s| {
        let u = head.embed(&s.features);
        let norm_sq = dot(&u, &u) + 1.0;
        let pred = head.predict_embedded(&u);
        Ok((0..k)
            .map(|j| {
                let r = pred[j] - s.labels[j];
                r * r * norm_sq
            })
            .collect::<Vec<f64>>())
    })?;
    build_table(rows, ds, cfg)
}

/// `S_ik = ‖∇L_k(z_i)‖²` over `cfg.scope`, from explicit gradients.
pub fn self_influence_explicit(
    head: &RegressionHead,
    ds: &Dataset,
    cfg: &InfluenceConfig,
) -> Result<SelfInfluenceTable> {
    head.check_dataset(ds)?;
    let rows = map_samples(ds, |s| {
        Ok(grad_per_dimension(head, s, cfg)?
            .iter()
            .map(|g| dot(g, g))
            .collect::<Vec<f64>>())
    })?;
    build_table(rows, ds, cfg)
}

fn build_table(rows: Vec<Vec<f64>>, ds: &Dataset, cfg: &InfluenceConfig) -> Result<SelfInfluenceTable> {
    let k = ds.n_dims();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let mut table = SelfInfluenceTable::new(DMatrix::from_row_slice(ds.len(), k, &flat), ds.ids())?;
    table.scope = cfg.scope;
    table.lambda = cfg.lambda_for(k)?;
    Ok(table)
}

/// Closed form for head-only scope, explicit gradients otherwise.
pub fn self_influence(head: &RegressionHead, ds: &Dataset, cfg: &InfluenceConfig) -> Result<SelfInfluenceTable> {
    match cfg.scope {
        Scope::HeadOnly => self_influence_closed_form(head, ds, cfg),
        Scope::LastTwoLayers => self_influence_explicit(head, ds, cfg),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledMatrix {
    /// `phi[(j, k)]`: influence of the training sample's dimension `k` on the
    /// test sample's dimension `j`.
    pub phi: DMatrix<f64>,
    pub train_id: String,
    pub test_id: String,
}

impl DisentangledMatrix {
    pub fn total(&self) -> f64 {
        self.phi.iter().sum()
    }
}

/// `φ_jk = λ_j λ_k ⟨∇L_j(z_test), ∇L_k(z_train)⟩`.
pub fn disentangled_matrix(
    head: &RegressionHead,
    z_train: &Sample,
    z_test: &Sample,
    cfg: &InfluenceConfig,
) -> Result<DisentangledMatrix> {
    let lambda = cfg.lambda_for(head.n_dims())?;
    let g_train = grad_per_dimension(head, z_train, cfg)?;
    let g_test = grad_per_dimension(head, z_test, cfg)?;
    let k = head.n_dims();
    let phi = DMatrix::from_fn(k, k, |j, l| lambda[j] * lambda[l] * dot(&g_test[j], &g_train[l]));
    Ok(DisentangledMatrix {
        phi,
        train_id: z_train.id.clone(),
        test_id: z_test.id.clone(),
    })
}

fn aggregated_gradient(grads: &[Vec<f64>], lambda: &[f64]) -> Vec<f64> {
    let mut total = vec![0.0; grads.first().map_or(0, Vec::len)];
    for (g, l) in grads.iter().zip(lambda) {
        for (t, v) in total.iter_mut().zip(g) {
            *t += l * v;
        }
    }
    total
}

/// Standard (aggregated-loss) influence with identity Hessian, computed from
/// the summed gradient rather than from the matrix.
pub fn scalar_influence(
    head: &RegressionHead,
    z_train: &Sample,
    z_test: &Sample,
    cfg: &InfluenceConfig,
) -> Result<f64> {
    let lambda = cfg.lambda_for(head.n_dims())?;
    let g_train = aggregated_gradient(&grad_per_dimension(head, z_train, cfg)?, &lambda);
    let g_test = aggregated_gradient(&grad_per_dimension(head, z_test, cfg)?, &lambda);
    Ok(dot(&g_test, &g_train))
}

/// Scalar self-influence of every sample at the probe checkpoint (TracIn
/// collapsed to a single checkpoint).
pub fn global_tracin_self(head: &RegressionHead, ds: &Dataset, cfg: &InfluenceConfig) -> Result<Vec<f64>> {
    head.check_dataset(ds)?;
    let lambda = cfg.lambda_for(head.n_dims())?;
    map_samples(ds, |s| {
        let g = aggregated_gradient(&grad_per_dimension(head, s, cfg)?, &lambda);
        Ok(dot(&g, &g))
    })
}

/// Entry `(i, j) = Σ_k φ_jk(z_i, z_i)`: diagonal plus off-diagonal mass of
/// row `j`. May be negative.
pub fn row_sum_scores(head: &RegressionHead, ds: &Dataset, cfg: &InfluenceConfig) -> Result<DMatrix<f64>> {
    head.check_dataset(ds)?;
    let k = head.n_dims();
    let rows = map_samples(ds, |s| {
        let m = disentangled_matrix(head, s, s, cfg)?;
        Ok((0..k).map(|j| m.phi.row(j).sum()).collect::<Vec<f64>>())
    })?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(ds.len(), k, &flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SharedLayer;
    use serde_json::Map;

    fn one_dim_head(w: Vec<f64>, b: f64) -> RegressionHead {
        RegressionHead {
            head_weights: vec![w],
            head_biases: vec![b],
            shared_layer: None,
        }
    }

    fn two_layer_head() -> RegressionHead {
        RegressionHead {
            head_weights: vec![vec![0.5, -1.0, 0.25], vec![1.5, 0.3, -0.7]],
            head_biases: vec![0.1, -0.2],
            shared_layer: Some(SharedLayer {
                weights: vec![vec![1.0, 0.2], vec![-0.3, 0.8], vec![0.4, 0.4]],
                bias: vec![0.05, 0.0, -0.1],
            }),
        }
    }

    #[test]
    fn head_only_gradient_block() {
        // prediction 0 with zero weights; label -2 gives r = 2
        let head = one_dim_head(vec![0.0, 0.0], 0.0);
        let s = Sample::new("a", vec![3.0, 4.0], vec![-2.0]);
        let g = grad_per_dimension(&head, &s, &InfluenceConfig::head_only()).unwrap();
        assert_eq!(g, vec![vec![6.0, 8.0, 2.0]]);

        let ds = Dataset::new(vec![s], vec!["x".into()], 2, Map::new()).unwrap();
        let table = self_influence_closed_form(&head, &ds, &InfluenceConfig::head_only()).unwrap();
        assert_eq!(table.scores[(0, 0)], 104.0);
    }

    #[test]
    fn zero_residual_gives_zero_everywhere() {
        let head = two_layer_head();
        let feats = vec![0.7, -1.2];
        let labels = head.predict(&feats).unwrap();
        let s = Sample::new("z", feats, labels);
        for scope in [Scope::HeadOnly, Scope::LastTwoLayers] {
            let g = grad_per_dimension(&head, &s, &InfluenceConfig::with_scope(scope)).unwrap();
            assert!(g.iter().flatten().all(|v| *v == 0.0));
            let v = scalar_influence(&head, &s, &s, &InfluenceConfig::with_scope(scope)).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn scope_mismatch_is_rejected() {
        let head = one_dim_head(vec![1.0], 0.0);
        let s = Sample::new("a", vec![1.0], vec![0.0]);
        let cfg = InfluenceConfig::with_scope(Scope::LastTwoLayers);
        assert!(matches!(
            grad_per_dimension(&head, &s, &cfg),
            Err(Error::ScopeMismatch { .. })
        ));
        let ds = Dataset::new(vec![s], vec!["x".into()], 1, Map::new()).unwrap();
        assert!(self_influence_closed_form(&two_layer_head(), &ds, &cfg).is_err());
    }

    #[test]
    fn two_layer_matrix_is_symmetric_on_self_pairs() {
        let head = two_layer_head();
        let s = Sample::new("a", vec![0.3, 2.0], vec![1.0, -1.0]);
        let m = disentangled_matrix(&head, &s, &s, &InfluenceConfig::with_scope(Scope::LastTwoLayers)).unwrap();
        assert_eq!(m.phi[(0, 1)], m.phi[(1, 0)]);
        assert!(m.phi[(0, 1)].abs() > 1e-6);
    }

    #[test]
    fn lambda_scaling_is_quadratic() {
        let head = two_layer_head();
        let s = Sample::new("a", vec![0.3, 2.0], vec![1.0, -1.0]);
        let ds = Dataset::new(vec![s.clone()], vec!["x".into(), "y".into()], 2, Map::new()).unwrap();
        let base = global_tracin_self(&head, &ds, &InfluenceConfig::head_only()).unwrap()[0];
        let table = self_influence_explicit(&head, &ds, &InfluenceConfig::head_only()).unwrap();
        let scaled = InfluenceConfig {
            lambda: vec![3.0, 1.0],
            ..InfluenceConfig::head_only()
        };
        let v = global_tracin_self(&head, &ds, &scaled).unwrap()[0];
        let expected = base + 8.0 * table.scores[(0, 0)];
        assert!((v - expected).abs() < 1e-10 * expected);

        let zeroed = InfluenceConfig {
            lambda: vec![0.0, 1.0],
            scope: Scope::LastTwoLayers,
        };
        let rows = row_sum_scores(&head, &ds, &zeroed).unwrap();
        assert_eq!(rows[(0, 0)], 0.0);
    }

    #[test]
    fn jsonl_round_trip_and_csv_header() {
        let table = SelfInfluenceTable::new(
            DMatrix::from_row_slice(2, 2, &[0.1, 2.5, 1e-300, 3.0]),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let mut buf = Vec::new();
        table.write_jsonl(&mut buf).unwrap();
        assert_eq!(SelfInfluenceTable::read_jsonl(buf.as_slice()).unwrap(), table);
        let mut csv = Vec::new();
        table.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("id,dim,score\na,0,0.1\na,1,2.5\n"));
        assert!(SelfInfluenceTable::new(DMatrix::from_element(1, 1, -1.0), vec!["a".into()]).is_err());
    }
}
