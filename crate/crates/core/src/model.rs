//! Multi-head linear regression over fixed feature vectors.
//!
//! Each of the `K` label dimensions gets its own affine head. An optional
//! shared affine layer (identity activation) sits between the features and
//! the heads; it couples the heads' gradients and is used for the
//! two-layer influence scope.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::util::{dot, sample_normal, seeded_rng};

/// Which parameters a gradient (and hence an influence score) ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Per-dimension output weights and biases only.
    HeadOnly,
    /// Output heads plus the shared layer feeding them.
    LastTwoLayers,
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::HeadOnly => "head_only",
            Scope::LastTwoLayers => "last_two_layers",
        })
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head_only" | "head-only" => Ok(Scope::HeadOnly),
            "last_two_layers" | "last-two-layers" => Ok(Scope::LastTwoLayers),
            other => Err(Error::InvalidArgument(format!("unknown scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedLayer {
    /// `m × d`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl SharedLayer {
    pub fn identity(dim: usize) -> SharedLayer {
        SharedLayer {
            weights: (0..dim)
                .map(|r| (0..dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
                .collect(),
            bias: vec![0.0; dim],
        }
    }

    pub fn forward(&self, features: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| dot(row, features) + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionHead {
    /// `K` vectors, each of the embedding width.
    pub head_weights: Vec<Vec<f64>>,
    pub head_biases: Vec<f64>,
    #[serde(default)]
    pub shared_layer: Option<SharedLayer>,
}

impl RegressionHead {
    pub fn zeros(n_dims: usize, feature_dim: usize) -> RegressionHead {
        RegressionHead {
            head_weights: vec![vec![0.0; feature_dim]; n_dims],
            head_biases: vec![0.0; n_dims],
            shared_layer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.head_weights.len();
        let bad = |msg: String| Err(Error::InvalidArgument(format!("malformed head: {msg}")));
        if k == 0 || self.head_biases.len() != k {
            return bad(format!("{} weight vectors vs {} biases", k, self.head_biases.len()));
        }
        let m = self.head_weights[0].len();
        if self.head_weights.iter().any(|w| w.len() != m) {
            return bad("head weight vectors differ in length".into());
        }
        if let Some(layer) = &self.shared_layer {
            if layer.weights.len() != m || layer.bias.len() != m {
                return bad(format!("shared layer output width differs from head width {m}"));
            }
            let d = layer.weights.first().map_or(0, Vec::len);
            if d == 0 || layer.weights.iter().any(|r| r.len() != d) {
                return bad("shared layer rows differ in length".into());
            }
        }
        let all = self.head_weights.iter().flatten().chain(&self.head_biases).chain(
            self.shared_layer
                .iter()
                .flat_map(|l| l.weights.iter().flatten().chain(&l.bias)),
        );
        if all.into_iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    pub fn n_dims(&self) -> usize {
        self.head_weights.len()
    }

    /// Width of the vector the heads read (`m` with a shared layer, else `d`).
    pub fn embed_dim(&self) -> usize {
        self.head_weights.first().map_or(0, Vec::len)
    }

    pub fn input_dim(&self) -> usize {
        match &self.shared_layer {
            Some(layer) => layer.weights.first().map_or(0, Vec::len),
            None => self.embed_dim(),
        }
    }

    /// The widest scope this head supports.
    pub fn scope(&self) -> Scope {
        if self.shared_layer.is_some() {
            Scope::LastTwoLayers
        } else {
            Scope::HeadOnly
        }
    }

    pub fn supports(&self, scope: Scope) -> bool {
        scope == Scope::HeadOnly || self.shared_layer.is_some()
    }

    /// Number of parameters in `scope`.
    pub fn scope_len(&self, scope: Scope) -> usize {
        let head = self.n_dims() * (self.embed_dim() + 1);
        match (scope, &self.shared_layer) {
            (Scope::LastTwoLayers, Some(_)) => head + self.embed_dim() * (self.input_dim() + 1),
            _ => head,
        }
    }

    /// Offset of head `k`'s block inside a flattened `scope` vector.
    pub fn head_offset(&self, scope: Scope, k: usize) -> usize {
        let shared = match (scope, &self.shared_layer) {
            (Scope::LastTwoLayers, Some(_)) => self.embed_dim() * (self.input_dim() + 1),
            _ => 0,
        };
        shared + k * (self.embed_dim() + 1)
    }

    /// Flattens `scope` parameters: shared weights (row-major) and shared
    /// bias first when present, then `w_k, b_k` for each head.
    pub fn flatten(&self, scope: Scope) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.scope_len(scope));
        if let (Scope::LastTwoLayers, Some(layer)) = (scope, &self.shared_layer) {
            flat.extend(layer.weights.iter().flatten());
            flat.extend(&layer.bias);
        }
        for (w, b) in self.head_weights.iter().zip(&self.head_biases) {
            flat.extend(w);
            flat.push(*b);
        }
        flat
    }

    /// Inverse of [`flatten`](Self::flatten); parameters outside `scope` are kept.
    pub fn with_flat(&self, scope: Scope, flat: &[f64]) -> RegressionHead {
        assert_eq!(flat.len(), self.scope_len(scope), "flat parameter length");
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        if let (Scope::LastTwoLayers, Some(layer)) = (scope, out.shared_layer.as_mut()) {
            for v in layer.weights.iter_mut().flatten().chain(layer.bias.iter_mut()) {
                *v = it.next().unwrap();
            }
        }
        for (w, b) in out.head_weights.iter_mut().zip(out.head_biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = it.next().unwrap();
            }
            *b = it.next().unwrap();
        }
        out
    }

    /// Representation the heads read.
    pub fn embed(&self, features: &[f64]) -> Vec<f64> {
        match &self.shared_layer {
            Some(layer) => layer.forward(features),
            None => features.to_vec(),
        }
    }

    fn check_input(&self, id: &str, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                id: id.to_owned(),
                what: "features",
                expected: self.input_dim(),
                found: features.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn predict_embedded(&self, embedding: &[f64]) -> Vec<f64> {
        self.head_weights
            .iter()
            .zip(&self.head_biases)
            .map(|(w, b)| dot(w, embedding) + b)
            .collect()
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_input("<input>", features)?;
        Ok(self.predict_embedded(&self.embed(features)))
    }

    pub(crate) fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.n_dims() != self.n_dims() {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} label dimensions, head has {}",
                ds.n_dims(),
                self.n_dims()
            )));
        }
        if ds.feature_dim() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "dataset feature_dim {} does not match head input width {}",
                ds.feature_dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

pub fn save_head(head: &RegressionHead, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, head)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_head(path: impl AsRef<Path>) -> Result<RegressionHead> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let head: RegressionHead = serde_json::from_reader(BufReader::new(file))?;
    head.validate()?;
    Ok(head)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Equal,
    UncertaintyWeighting,
    /// Random loss weighting: fresh softmax-normalised weights every epoch.
    Rlw,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(Strategy::Equal),
            "uncertainty_weighting" | "uncertainty-weighting" | "uw" => Ok(Strategy::UncertaintyWeighting),
            "rlw" => Ok(Strategy::Rlw),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Closed form for equal weighting without a hidden layer, gradient descent
/// otherwise.
pub fn fit_head(ds: &Dataset, weights: Option<&DMatrix<f64>>, config: &TrainConfig) -> Result<RegressionHead> {
    if config.strategy == Strategy::Equal && config.hidden_dim.is_none() {
        fit_closed_form(ds, weights, config)
    } else {
        Ok(fit_gd(ds, weights, config)?.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Per-dimension loss weights; empty means all ones.
    pub lambda: Vec<f64>,
    pub ridge_alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub hidden_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: Vec::new(),
            ridge_alpha: 1e-6,
            lr: 0.1,
            epochs: 500,
            strategy: Strategy::Equal,
            seed: 0,
            hidden_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn lambda_for(&self, n_dims: usize) -> Result<Vec<f64>> {
        resolve_lambda(&self.lambda, n_dims)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_alpha.is_finite() && self.ridge_alpha >= 0.0) {
            return Err(Error::InvalidConfig("ridge_alpha must be nonnegative".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        if self.lambda.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidConfig("lambda entries must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn resolve_lambda(lambda: &[f64], n_dims: usize) -> Result<Vec<f64>> {
    match lambda.len() {
        0 => Ok(vec![1.0; n_dims]),
        1 => Ok(vec![lambda[0]; n_dims]),
        n if n == n_dims => Ok(lambda.to_vec()),
        n => Err(Error::InvalidConfig(format!(
            "lambda has {n} entries for {n_dims} dimensions"
        ))),
    }
}

fn check_weights(ds: &Dataset, weights: Option<&DMatrix<f64>>) -> Result<()> {
    if let Some(w) = weights {
        if w.shape() != (ds.len(), ds.n_dims()) {
            return Err(Error::InvalidArgument(format!(
                "weight matrix is {}x{}, dataset is {}x{}",
                w.nrows(),
                w.ncols(),
                ds.len(),
                ds.n_dims()
            )));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "sample weights must be finite and nonnegative".into(),
            ));
        }
    }
    Ok(())
}

/// Solves `min Σ_i c_i · ½(xᵢ·β − yᵢ)² + ½α Σ_{j penalised} β_j²` by Cholesky
/// on the normal equations. Returns `None` when the system is singular.
pub fn solve_weighted_ridge(
    design: &[Vec<f64>],
    targets: &[f64],
    sample_weights: Option<&[f64]>,
    alpha: f64,
    penalized: &[bool],
) -> Option<Vec<f64>> {
    let p = penalized.len();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (i, (x, &y)) in design.iter().zip(targets).enumerate() {
        let c = sample_weights.map_or(1.0, |w| w[i]);
        if c == 0.0 {
            continue;
        }
        for a in 0..p {
            let cx = c * x[a];
            rhs[a] += cx * y;
            for b in 0..=a {
                gram[(a, b)] += cx * x[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
        if penalized[a] {
            gram[(a, a)] += alpha;
        }
    }
    let scale = gram.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    let chol = gram.cholesky()?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v * v));
    if min_pivot <= 1e-13 * scale {
        return None;
    }
    Some(chol.solve(&rhs).iter().copied().collect())
}

/// Per-dimension weighted ridge regression over `[h; 1]`, bias unpenalised.
///
/// A zero in `weights[(i, k)]` removes sample `i` from dimension `k`'s fit
/// exactly. `lambda` does not enter: the dimensions decouple.
pub fn fit_closed_form(ds: &Dataset, weights: Option<&DMatrix<f64>>, config: &TrainConfig) -> Result<RegressionHead> {
    config.validate()?;
    if config.hidden_dim.is_some() {
        return Err(Error::InvalidConfig(
            "closed-form fitting supports head-only models; use gradient descent with hidden_dim".into(),
        ));
    }
    check_weights(ds, weights)?;
    let d = ds.feature_dim();
    let design: Vec<Vec<f64>> = ds
        .samples()
        .iter()
        .map(|s| {
            let mut x = s.features.clone();
            x.push(1.0);
            x
        })
        .collect();
    let mut penalized = vec![true; d + 1];
    penalized[d] = false;

    let mut head = RegressionHead::zeros(ds.n_dims(), d);
    for k in 0..ds.n_dims() {
        let column_weights: Option<Vec<f64>> = weights.map(|w| w.column(k).iter().copied().collect());
        let beta = solve_weighted_ridge(
            &design,
            &ds.label_column(k),
            column_weights.as_deref(),
            config.ridge_alpha,
            &penalized,
        )
        .ok_or(Error::RankDeficient { dim: k })?;
        head.head_weights[k] = beta[..d].to_vec();
        head.head_biases[k] = beta[d];
    }
    Ok(head)
}

/// Full-batch training objective
/// `(1/N) [Σ_i Σ_k λ_k c_ik · ½ r_ik² + ½α ‖non-bias weights‖²]`.
pub struct Objective<'a> {
    ds: &'a Dataset,
    weights: Option<&'a DMatrix<f64>>,
    alpha: f64,
}

impl<'a> Objective<'a> {
    pub fn new(ds: &'a Dataset, weights: Option<&'a DMatrix<f64>>, alpha: f64) -> Result<Self> {
        check_weights(ds, weights)?;
        Ok(Objective { ds, weights, alpha })
    }

    fn weight(&self, i: usize, k: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[(i, k)])
    }

    /// Mean weighted loss per dimension, `(1/N) Σ_i c_ik · ½ r_ik²`.
    pub fn dimension_losses(&self, head: &RegressionHead) -> Vec<f64> {
        let n = self.ds.len().max(1) as f64;
        let mut out = vec![0.0; head.n_dims()];
        for (i, s) in self.ds.samples().iter().enumerate() {
            let pred = head.predict_embedded(&head.embed(&s.features));
            for k in 0..out.len() {
                let r = pred[k] - s.labels[k];
                out[k] += self.weight(i, k) * 0.5 * r * r;
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    fn penalty(&self, head: &RegressionHead) -> f64 {
        let shared: f64 = head
            .shared_layer
            .iter()
            .flat_map(|l| l.weights.iter().flatten())
            .map(|v| v * v)
            .sum();
        let heads: f64 = head.head_weights.iter().flatten().map(|v| v * v).sum();
        0.5 * self.alpha * (shared + heads) / self.ds.len().max(1) as f64
    }

    pub fn value(&self, head: &RegressionHead, lambda: &[f64]) -> f64 {
        dot(lambda, &self.dimension_losses(head)) + self.penalty(head)
    }

    /// Analytic gradient over the head's full scope, in
    /// [`RegressionHead::flatten`] layout.
    pub fn gradient(&self, head: &RegressionHead, lambda: &[f64]) -> Vec<f64> {
        let scope = head.scope();
        let n = self.ds.len().max(1) as f64;
        let m = head.embed_dim();
        let d = head.input_dim();
        let mut grad = vec![0.0; head.scope_len(scope)];
        for (i, s) in self.ds.samples().iter().enumerate() {
            let u = head.embed(&s.features);
            let pred = head.predict_embedded(&u);
            // back-propagated signal into the embedding
            let mut du = vec![0.0; m];
            for k in 0..head.n_dims() {
                let g = lambda[k] * self.weight(i, k) * (pred[k] - s.labels[k]) / n;
                if g == 0.0 {
                    continue;
                }
                let off = head.head_offset(scope, k);
                for j in 0..m {
                    grad[off + j] += g * u[j];
                    du[j] += g * head.head_weights[k][j];
                }
                grad[off + m] += g;
            }
            if head.shared_layer.is_some() {
                for r in 0..m {
                    for c in 0..d {
                        grad[r * d + c] += du[r] * s.features[c];
                    }
                    grad[m * d + r] += du[r];
                }
            }
        }
        let ridge = self.alpha / n;
        if ridge > 0.0 {
            if let Some(layer) = &head.shared_layer {
                for (g, w) in grad.iter_mut().zip(layer.weights.iter().flatten()) {
                    *g += ridge * w;
                }
            }
            for k in 0..head.n_dims() {
                let off = head.head_offset(scope, k);
                for j in 0..m {
                    grad[off + j] += ridge * head.head_weights[k][j];
                }
            }
        }
        grad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdFit {
    pub head: RegressionHead,
    /// Objective value at the start of each epoch, plus the final value.
    pub loss_trajectory: Vec<f64>,
    /// Learned per-dimension log-variances (uncertainty weighting only).
    pub log_variances: Option<Vec<f64>>,
}

/// Full-batch gradient descent, used by the dynamic-weighting strategies.
pub fn fit_gd(ds: &Dataset, weights: Option<&DMatrix<f64>>, config: &TrainConfig) -> Result<GdFit> {
    config.validate()?;
    let k = ds.n_dims();
    let d = ds.feature_dim();
    let lambda = config.lambda_for(k)?;
    let objective = Objective::new(ds, weights, config.ridge_alpha)?;

    let mut head = RegressionHead::zeros(k, config.hidden_dim.unwrap_or(d));
    if let Some(m) = config.hidden_dim {
        let mut rng = seeded_rng(config.seed, 0);
        let init = Normal::new(0.0, 0.1).expect("valid normal");
        head.shared_layer = Some(SharedLayer {
            weights: (0..m)
                .map(|_| (0..d).map(|_| init.sample(&mut rng)).collect())
                .collect(),
            bias: (0..m).map(|_| init.sample(&mut rng)).collect(),
        });
    }
    let scope = head.scope();
    let mut log_var: Vec<f64> = vec![0.0; k];
    let mut rlw_rng = seeded_rng(config.seed, 1);
    let mut trajectory = Vec::with_capacity(config.epochs + 1);

    for epoch in 0..config.epochs {
        let effective: Vec<f64> = match config.strategy {
            Strategy::Equal => lambda.clone(),
            Strategy::UncertaintyWeighting => lambda.iter().zip(&log_var).map(|(l, s)| l * (-*s).exp()).collect(),
            Strategy::Rlw => {
                let draws: Vec<f64> = (0..k).map(|_| sample_normal(&mut rlw_rng)).collect();
                let max = draws.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let exps: Vec<f64> = draws.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                lambda.iter().zip(exps).map(|(l, e)| l * e / total).collect()
            }
        };
        let losses = objective.dimension_losses(&head);
        let mut loss = dot(&effective, &losses) + objective.penalty(&head);
        if config.strategy == Strategy::UncertaintyWeighting {
            loss += 0.5 * log_var.iter().sum::<f64>();
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        trajectory.push(loss);

        let grad = objective.gradient(&head, &effective);
        let params: Vec<f64> = head
            .flatten(scope)
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - config.lr * g)
            .collect();
        if config.strategy == Strategy::UncertaintyWeighting {
            for j in 0..k {
                let g = -lambda[j] * (-log_var[j]).exp() * losses[j] + 0.5;
                log_var[j] -= config.lr * g;
            }
        }
        head = head.with_flat(scope, &params);
    }

    let final_lambda: Vec<f64> = match config.strategy {
        Strategy::UncertaintyWeighting => lambda.iter().zip(&log_var).map(|(l, s)| l * (-*s).exp()).collect(),
        _ => lambda.clone(),
    };
    let mut last = objective.value(&head, &final_lambda);
    if config.strategy == Strategy::UncertaintyWeighting {
        last += 0.5 * log_var.iter().sum::<f64>();
    }
    if !last.is_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
            loss: last,
        });
    }
    trajectory.push(last);
    head.validate()?;
    Ok(GdFit {
        head,
        loss_trajectory: trajectory,
        log_variances: (config.strategy == Strategy::UncertaintyWeighting).then_some(log_var),
    })
}

/// `r_ik = ŷ_k(h_i) − y_ik`, as an N×K matrix.
pub fn residuals(head: &RegressionHead, ds: &Dataset) -> Result<DMatrix<f64>> {
    head.check_dataset(ds)?;
    let mut out = DMatrix::zeros(ds.len(), ds.n_dims());
    for (i, s) in ds.samples().iter().enumerate() {
        let pred = head.predict_embedded(&head.embed(&s.features));
        for (k, (p, y)) in pred.iter().zip(&s.labels).enumerate() {
            out[(i, k)] = p - y;
        }
    }
    Ok(out)
}

/// Per-sample, per-dimension losses `½ r²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub values: DMatrix<f64>,
    pub sample_ids: Vec<String>,
}

pub fn per_dim_loss(head: &RegressionHead, ds: &Dataset) -> Result<LossTable> {
    let r = residuals(head, ds)?;
    Ok(LossTable {
        values: r.map(|v| 0.5 * v * v),
        sample_ids: ds.ids(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Sample, SynthConfig, Teacher};
    use serde_json::Map;

    fn corpus(n: usize, d: usize, k: usize, sd: Vec<f64>) -> Dataset {
        generate_synthetic(&SynthConfig {
            n_samples: n,
            feature_dim: d,
            n_dims: k,
            label_noise_sd: sd,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn closed(alpha: f64) -> TrainConfig {
        TrainConfig {
            ridge_alpha: alpha,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn hand_ridge_without_bias() {
        let design = vec![vec![1.0], vec![2.0]];
        let beta = solve_weighted_ridge(&design, &[2.0, 4.0], None, 1.0, &[true]).unwrap();
        assert!((beta[0] - 10.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_fit_recovers_teacher() {
        let cfg = SynthConfig {
            n_samples: 60,
            feature_dim: 5,
            n_dims: 3,
            label_noise_sd: vec![0.0],
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let head = fit_closed_form(&ds, None, &closed(0.0)).unwrap();
        let teacher = Teacher::from_config(&cfg);
        let r = residuals(&head, &ds).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-8));
        for k in 0..3 {
            for (a, b) in head.head_weights[k].iter().zip(&teacher.weights[k]) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!((head.head_biases[k] - teacher.biases[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn training_rmse_tracks_generator_noise() {
        let ds = corpus(200, 8, 5, vec![0.1]);
        let head = fit_closed_form(&ds, None, &closed(1e-6)).unwrap();
        let r = residuals(&head, &ds).unwrap();
        for k in 0..5 {
            let rmse = (r.column(k).iter().map(|v| v * v).sum::<f64>() / 200.0).sqrt();
            // sd of the RMSE estimate is about sd / sqrt(2N)
            assert!(
                (rmse - 0.1).abs() < 3.0 * 0.1 / (2.0 * 200f64).sqrt(),
                "dim {k}: {rmse}"
            );
        }
    }

    #[test]
    fn zero_weight_row_equals_deletion() {
        let ds = corpus(40, 4, 2, vec![0.3]);
        let mut w = DMatrix::from_element(40, 2, 1.0);
        w.row_mut(7).fill(0.0);
        let weighted = fit_closed_form(&ds, Some(&w), &closed(0.5)).unwrap();
        let keep: Vec<usize> = (0..40).filter(|&i| i != 7).collect();
        let deleted = fit_closed_form(&ds.subset(&keep), None, &closed(0.5)).unwrap();
        for (a, b) in weighted
            .flatten(Scope::HeadOnly)
            .iter()
            .zip(deleted.flatten(Scope::HeadOnly))
        {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn unit_weights_equal_unweighted_and_column_scale_is_invariant() {
        let ds = corpus(50, 3, 2, vec![0.5]);
        let plain = fit_closed_form(&ds, None, &closed(0.0)).unwrap();
        let ones = fit_closed_form(&ds, Some(&DMatrix::from_element(50, 2, 1.0)), &closed(0.0)).unwrap();
        assert_eq!(plain, ones);

        let mut w = DMatrix::from_fn(50, 2, |i, _| 0.5 + (i % 3) as f64);
        let base = fit_closed_form(&ds, Some(&w), &closed(0.0)).unwrap();
        w.column_mut(1).scale_mut(7.5);
        let scaled = fit_closed_form(&ds, Some(&w), &closed(0.0)).unwrap();
        for (a, b) in base.head_weights[1].iter().zip(&scaled.head_weights[1]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(base.head_weights[0], scaled.head_weights[0]);
    }

    #[test]
    fn rank_deficient_is_reported() {
        let samples = (0..5)
            .map(|i| Sample::new(format!("{i}"), vec![i as f64, 2.0 * i as f64], vec![i as f64]))
            .collect();
        let ds = Dataset::new(samples, vec!["a".into()], 2, Map::new()).unwrap();
        assert!(matches!(
            fit_closed_form(&ds, None, &closed(0.0)),
            Err(Error::RankDeficient { dim: 0 })
        ));
        assert!(fit_closed_form(&ds, None, &closed(1.0)).is_ok());
    }

    #[test]
    fn predict_cases() {
        let mut head = RegressionHead::zeros(2, 2);
        head.head_biases = vec![3.0, -1.0];
        assert_eq!(head.predict(&[5.0, 6.0]).unwrap(), vec![3.0, -1.0]);
        head.head_weights = vec![vec![1.0, 1.0]; 2];
        head.head_biases = vec![0.0; 2];
        assert_eq!(head.predict(&[2.0, 3.0]).unwrap(), vec![5.0, 5.0]);
        let mut two = head.clone();
        two.shared_layer = Some(SharedLayer::identity(2));
        assert_eq!(two.predict(&[2.0, 3.0]).unwrap(), vec![5.0, 5.0]);
        assert!(head.predict(&[1.0]).is_err());
    }

    #[test]
    fn losses_are_half_squared_residuals() {
        let ds = corpus(30, 3, 3, vec![0.4]);
        let mut head = fit_closed_form(&ds, None, &closed(0.1)).unwrap();
        head.head_biases[0] += 0.3;
        let r = residuals(&head, &ds).unwrap();
        let table = per_dim_loss(&head, &ds).unwrap();
        for i in 0..30 {
            for k in 0..3 {
                // independent recomputation from the raw prediction
                let s = &ds.samples()[i];
                let p = dot(&head.head_weights[k], &s.features) + head.head_biases[k];
                let loss = 0.5 * (p - s.labels[k]).powi(2);
                assert!((table.values[(i, k)] - loss).abs() < 1e-12);
                assert!((table.values[(i, k)] - 0.5 * r[(i, k)].powi(2)).abs() < 1e-12);
            }
        }
        let mut tiny = RegressionHead::zeros(1, 1);
        tiny.head_biases[0] = 3.0;
        let one = Dataset::new(
            vec![Sample::new("a", vec![0.0], vec![0.0])],
            vec!["x".into()],
            1,
            Map::new(),
        )
        .unwrap();
        assert_eq!(per_dim_loss(&tiny, &one).unwrap().values[(0, 0)], 4.5);
    }

    #[test]
    fn gd_converges_to_closed_form() {
        let ds = corpus(300, 4, 2, vec![0.2]);
        let exact = fit_closed_form(&ds, None, &closed(0.0)).unwrap();
        let cfg = TrainConfig {
            ridge_alpha: 0.0,
            lr: 0.5,
            epochs: 3000,
            ..TrainConfig::default()
        };
        let fit = fit_gd(&ds, None, &cfg).unwrap();
        let dist: f64 = exact
            .flatten(Scope::HeadOnly)
            .iter()
            .zip(fit.head.flatten(Scope::HeadOnly))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-4, "distance {dist}");
        assert!(fit.loss_trajectory.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rlw_is_deterministic() {
        let ds = corpus(80, 3, 3, vec![0.2]);
        let cfg = TrainConfig {
            strategy: Strategy::Rlw,
            epochs: 50,
            seed: 4,
            ..TrainConfig::default()
        };
        assert_eq!(fit_gd(&ds, None, &cfg).unwrap(), fit_gd(&ds, None, &cfg).unwrap());
    }

    #[test]
    fn uncertainty_weighting_prefers_noisier_dimension() {
        let ds = corpus(400, 4, 2, vec![1.0, 0.1]);
        let cfg = TrainConfig {
            strategy: Strategy::UncertaintyWeighting,
            // exp(-s) grows as a dimension's loss shrinks, so the step must be small
            lr: 0.01,
            epochs: 2000,
            ..TrainConfig::default()
        };
        let s = fit_gd(&ds, None, &cfg).unwrap().log_variances.unwrap();
        assert!(s[0] > s[1], "{s:?}");
    }

    #[test]
    fn divergence_reports_epoch() {
        let ds = corpus(50, 3, 1, vec![0.1]);
        let cfg = TrainConfig {
            lr: 1e6,
            epochs: 500,
            ..TrainConfig::default()
        };
        assert!(matches!(fit_gd(&ds, None, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn flatten_round_trips() {
        let ds = corpus(20, 3, 2, vec![0.1]);
        let fit = fit_gd(
            &ds,
            None,
            &TrainConfig {
                hidden_dim: Some(4),
                epochs: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        for scope in [Scope::HeadOnly, Scope::LastTwoLayers] {
            let flat = fit.head.flatten(scope);
            assert_eq!(flat.len(), fit.head.scope_len(scope));
            assert_eq!(fit.head.with_flat(scope, &flat), fit.head);
        }
        assert_eq!(fit.head.scope_len(Scope::LastTwoLayers), 4 * 4 + 2 * 5);
    }
}
