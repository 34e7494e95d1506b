//! Gradient-boosted decision trees over time-patch samples.
//!
//! A self-contained booster with logistic loss stands in for an external
//! boosting dependency behind the same interface: second-order (Newton)
//! leaf values, split candidates from per-feature rank quantiles (at most
//! 256 bins), positive-class weighting for the heavy imbalance of failure
//! data, and fully deterministic training.
//!
//! Because split thresholds are midpoints between adjacent distinct feature
//! values selected by rank, any strictly monotone rescaling of a feature
//! leaves the realized training partitions - and therefore the model's
//! predictions on the training set - unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ce_model::DimmUid;
use crate::error::{Error, Result};
use crate::hierarchy::{FeatureSchema, TimePatchSample};
use crate::par;

const MODEL_FORMAT_VERSION: u32 = 1;
const MIN_SPLIT_GAIN: f64 = 1e-12;
const MAX_LEAF_VALUE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Weight applied to positive samples; `None` means `|neg| / |pos|`.
    pub positive_weight: Option<f64>,
    /// Reserved for stochastic variants (row/feature subsampling); training
    /// itself is deterministic and does not draw from it. Echoed into
    /// artifacts.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 200,
            max_depth: 6,
            learning_rate: 0.05,
            min_samples_leaf: 20,
            positive_weight: None,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::config(
                "n_trees, max_depth and min_samples_leaf must be positive",
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if let Some(w) = self.positive_weight {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::config("positive_weight must be positive"));
            }
        }
        Ok(())
    }
}

/// One regression tree: axis-aligned threshold splits, Newton leaf values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: u32,
        threshold: f64,
        gain: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
    },
}

impl TreeNode {
    fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if x[*feature as usize] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    fn accumulate_gains(&self, names: &[String], gains: &mut BTreeMap<String, f64>) {
        if let TreeNode::Split {
            feature,
            gain,
            left,
            right,
            ..
        } = self
        {
            *gains.entry(names[*feature as usize].clone()).or_insert(0.0) += gain;
            left.accumulate_gains(names, gains);
            right.accumulate_gains(names, gains);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub version: u32,
    pub config: TrainConfig,
    pub schema: FeatureSchema,
    pub schema_fingerprint: String,
    /// Log-odds of the (weighted) positive prior.
    pub base_score: f64,
    pub trees: Vec<TreeNode>,
    /// Decision threshold selected by cross-validation, when available.
    pub threshold: Option<f64>,
}

impl GbdtModel {
    /// Raw log-odds prediction.
    pub fn predict_raw(&self, features: &[f64]) -> f64 {
        let mut acc = self.base_score;
        for tree in &self.trees {
            acc += self.config.learning_rate * tree.eval(features);
        }
        acc
    }

    /// Failure probability in `[0, 1]`.
    pub fn predict_score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.schema.len() {
            return Err(Error::SchemaMismatch {
                expected: format!("{} features", self.schema.len()),
                found: format!("{} features", features.len()),
            });
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::data("non-finite feature value"));
        }
        Ok(sigmoid(self.predict_raw(features)))
    }

    /// Score a batch of samples; pure per sample, parallel when enabled.
    pub fn predict_batch(&self, samples: &[TimePatchSample]) -> Result<Vec<f64>> {
        let scores = par::map_collect(samples, |s| self.predict_score(&s.features));
        scores.into_iter().collect()
    }

    /// Total split gain per feature, descending; ties broken by name.
    pub fn feature_importance(&self) -> Vec<(String, f64)> {
        let mut gains: BTreeMap<String, f64> = BTreeMap::new();
        for tree in &self.trees {
            tree.accumulate_gains(&self.schema.names, &mut gains);
        }
        let mut out: Vec<(String, f64)> = gains.into_iter().collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization is infallible")
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let model: GbdtModel =
            serde_json::from_str(raw).map_err(|e| Error::data(format!("model parse: {e}")))?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported model format version {}",
                model.version
            )));
        }
        if model.schema.fingerprint() != model.schema_fingerprint {
            return Err(Error::SchemaMismatch {
                expected: model.schema_fingerprint.clone(),
                found: model.schema.fingerprint(),
            });
        }
        Ok(model)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-feature rank-quantile thresholds, at most 255 cuts (256 bins).
fn quantile_thresholds(values: &mut Vec<f64>) -> Vec<f64> {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    if values.len() < 2 {
        return Vec::new();
    }
    let midpoints: Vec<f64> = values
        .windows(2)
        .map(|w| w[0] + (w[1] - w[0]) / 2.0)
        .collect();
    if midpoints.len() <= 255 {
        return midpoints;
    }
    let mut picked = Vec::with_capacity(255);
    for j in 0..255usize {
        picked.push(midpoints[j * midpoints.len() / 255]);
    }
    picked.dedup();
    picked
}

struct BinnedMatrix {
    /// thresholds[f] sorted ascending; bin b holds x with
    /// thresholds[b-1] < x <= thresholds[b].
    thresholds: Vec<Vec<f64>>,
    /// bins[f][row]
    bins: Vec<Vec<u8>>,
}

impl BinnedMatrix {
    fn build(samples: &[TimePatchSample], n_features: usize) -> BinnedMatrix {
        let mut thresholds = Vec::with_capacity(n_features);
        let mut bins = Vec::with_capacity(n_features);
        let mut column = Vec::with_capacity(samples.len());
        for f in 0..n_features {
            column.clear();
            column.extend(samples.iter().map(|s| s.features[f]));
            let cuts = quantile_thresholds(&mut column.clone());
            let binned: Vec<u8> = column
                .iter()
                .map(|&x| cuts.partition_point(|&t| t < x) as u8)
                .collect();
            thresholds.push(cuts);
            bins.push(binned);
        }
        BinnedMatrix { thresholds, bins }
    }
}

struct TreeGrower<'a> {
    matrix: &'a BinnedMatrix,
    grad: &'a [f64],
    hess: &'a [f64],
    max_depth: usize,
    min_samples_leaf: usize,
    /// Gains are stored per unit of total sample weight, which makes them
    /// (like every other fitted quantity) invariant under duplicating the
    /// training set.
    inv_total_weight: f64,
    /// Leaf value contributions for this tree, indexed by row.
    leaf_raw: Vec<f64>,
}

impl<'a> TreeGrower<'a> {
    fn grow(&mut self, rows: Vec<u32>, depth: usize) -> TreeNode {
        let (g_sum, h_sum) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        let best = if depth < self.max_depth {
            self.best_split(&rows, g_sum, h_sum)
        } else {
            None
        };
        match best {
            None => {
                let value = leaf_value(g_sum, h_sum);
                for &r in &rows {
                    self.leaf_raw[r as usize] = value;
                }
                TreeNode::Leaf { value }
            }
            Some((gain, feature, bin)) => {
                let column = &self.matrix.bins[feature];
                let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows
                    .into_iter()
                    .partition(|&r| column[r as usize] as usize <= bin);
                let threshold = self.matrix.thresholds[feature][bin];
                let left = self.grow(left_rows, depth + 1);
                let right = self.grow(right_rows, depth + 1);
                TreeNode::Split {
                    feature: feature as u32,
                    threshold,
                    gain,
                    left: Box::new(left),
                    right: Box::new(right),
                }
            }
        }
    }

    /// Best `(gain, feature, bin)` over all candidates, scanned in feature
    /// then threshold order so ties resolve deterministically to the first.
    fn best_split(&self, rows: &[u32], g_sum: f64, h_sum: f64) -> Option<(f64, usize, usize)> {
        if rows.len() < 2 * self.min_samples_leaf {
            return None;
        }
        let parent_obj = objective(g_sum, h_sum);
        let mut best: Option<(f64, usize, usize)> = None;
        let mut hist_g = [0.0f64; 256];
        let mut hist_h = [0.0f64; 256];
        let mut hist_n = [0u32; 256];
        for (feature, cuts) in self.matrix.thresholds.iter().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            let n_bins = cuts.len() + 1;
            hist_g[..n_bins].fill(0.0);
            hist_h[..n_bins].fill(0.0);
            hist_n[..n_bins].fill(0);
            let column = &self.matrix.bins[feature];
            for &r in rows {
                let b = column[r as usize] as usize;
                hist_g[b] += self.grad[r as usize];
                hist_h[b] += self.hess[r as usize];
                hist_n[b] += 1;
            }
            let mut gl = 0.0;
            let mut hl = 0.0;
            let mut nl = 0u32;
            for bin in 0..cuts.len() {
                gl += hist_g[bin];
                hl += hist_h[bin];
                nl += hist_n[bin];
                let nr = rows.len() as u32 - nl;
                if (nl as usize) < self.min_samples_leaf || (nr as usize) < self.min_samples_leaf {
                    continue;
                }
                let gain = (objective(gl, hl) + objective(g_sum - gl, h_sum - hl) - parent_obj)
                    * self.inv_total_weight;
                if gain > best.map_or(MIN_SPLIT_GAIN, |(g, _, _)| g) {
                    best = Some((gain, feature, bin));
                }
            }
        }
        best
    }
}

/// Half the squared-gradient objective `G^2 / H` used for gain computation.
fn objective(g: f64, h: f64) -> f64 {
    if h < 1e-12 {
        0.0
    } else {
        0.5 * g * g / h
    }
}

fn leaf_value(g: f64, h: f64) -> f64 {
    if h < 1e-12 {
        0.0
    } else {
        (-g / h).clamp(-MAX_LEAF_VALUE, MAX_LEAF_VALUE)
    }
}

/// Train a boosted ensemble. Deterministic: identical inputs produce a
/// byte-identical serialized model.
pub fn train(
    samples: &[TimePatchSample],
    schema: &FeatureSchema,
    config: &TrainConfig,
) -> Result<GbdtModel> {
    config.validate()?;
    let n = samples.len();
    let n_features = schema.len();
    let n_pos = samples.iter().filter(|s| s.label).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data(
            "training requires at least one positive and one negative sample",
        ));
    }
    for s in samples {
        if s.features.len() != n_features {
            return Err(Error::SchemaMismatch {
                expected: format!("{n_features} features"),
                found: format!("{} features", s.features.len()),
            });
        }
        if s.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::data("non-finite feature value in training data"));
        }
    }

    let w_pos = config
        .positive_weight
        .unwrap_or(n_neg as f64 / n_pos as f64);
    let weights: Vec<f64> = samples
        .iter()
        .map(|s| if s.label { w_pos } else { 1.0 })
        .collect();
    let labels: Vec<f64> = samples
        .iter()
        .map(|s| if s.label { 1.0 } else { 0.0 })
        .collect();
    let weight_total: f64 = weights.iter().sum();
    let weight_pos: f64 = w_pos * n_pos as f64;
    let prior = weight_pos / weight_total;
    let base_score = (prior / (1.0 - prior)).ln();

    let matrix = BinnedMatrix::build(samples, n_features);
    let mut raw = vec![base_score; n];
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n];
    let mut trees = Vec::with_capacity(config.n_trees);
    for _ in 0..config.n_trees {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            grad[i] = weights[i] * (p - labels[i]);
            hess[i] = weights[i] * p * (1.0 - p);
        }
        let mut grower = TreeGrower {
            matrix: &matrix,
            grad: &grad,
            hess: &hess,
            max_depth: config.max_depth,
            min_samples_leaf: config.min_samples_leaf,
            inv_total_weight: 1.0 / weight_total,
            leaf_raw: vec![0.0; n],
        };
        let tree = grower.grow((0..n as u32).collect(), 0);
        if let TreeNode::Leaf { value } = &tree {
            if value.abs() < 1e-9 {
                // Nothing left to learn; later rounds would repeat this.
                break;
            }
        }
        for (r, leaf) in raw.iter_mut().zip(&grower.leaf_raw) {
            *r += config.learning_rate * leaf;
        }
        trees.push(tree);
    }

    Ok(GbdtModel {
        version: MODEL_FORMAT_VERSION,
        config: config.clone(),
        schema: schema.clone(),
        schema_fingerprint: schema.fingerprint(),
        base_score,
        trees,
        threshold: None,
    })
}

/// DIMM-level F1 of thresholded scores against sample labels: a DIMM is
/// predicted if any of its samples scores at or above the threshold, and
/// correctly predicted if such a sample is labeled positive.
fn dimm_f1(max_any: &[f64], max_pos: &[f64], n_failed: usize, threshold: f64) -> f64 {
    let n_pred = max_any.iter().filter(|&&s| s >= threshold).count();
    let n_true = max_pos.iter().filter(|&&s| s >= threshold).count();
    if n_pred == 0 || n_failed == 0 {
        return 0.0;
    }
    let p = n_true as f64 / n_pred as f64;
    let r = n_true as f64 / n_failed as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Select a decision threshold by k-fold cross-validation.
///
/// Folds partition DIMMs, never samples, so adjacent windows of one DIMM
/// cannot straddle a fold boundary. The returned threshold maximizes the
/// mean DIMM-level F1 of out-of-fold scores, searched over the sorted unique
/// scores; ties prefer the higher threshold (fewer alarms), and the chosen
/// cut is smoothed to the midpoint of its score gap.
pub fn select_threshold(
    samples: &[TimePatchSample],
    schema: &FeatureSchema,
    config: &TrainConfig,
    k_folds: usize,
) -> Result<f64> {
    if k_folds < 2 {
        return Err(Error::config("k_folds must be at least 2"));
    }
    let mut dimm_samples: BTreeMap<&DimmUid, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        dimm_samples.entry(&s.dimm_uid).or_default().push(i);
    }
    let mut pos_dimms = Vec::new();
    let mut neg_dimms = Vec::new();
    for (uid, rows) in &dimm_samples {
        if rows.iter().any(|&i| samples[i].label) {
            pos_dimms.push(*uid);
        } else {
            neg_dimms.push(*uid);
        }
    }
    if pos_dimms.len() < k_folds {
        return Err(Error::config(format!(
            "threshold selection needs at least {k_folds} DIMMs with positive samples, found {}",
            pos_dimms.len()
        )));
    }

    let mut fold_of: BTreeMap<&DimmUid, usize> = BTreeMap::new();
    for (i, uid) in pos_dimms.iter().enumerate() {
        fold_of.insert(uid, i % k_folds);
    }
    for (i, uid) in neg_dimms.iter().enumerate() {
        fold_of.insert(uid, i % k_folds);
    }

    // Out-of-fold per-DIMM score maxima.
    let mut fold_max_any: Vec<Vec<f64>> = vec![Vec::new(); k_folds];
    let mut fold_max_pos: Vec<Vec<f64>> = vec![Vec::new(); k_folds];
    let mut fold_failed: Vec<usize> = vec![0; k_folds];
    let mut all_scores: Vec<f64> = Vec::new();
    for fold in 0..k_folds {
        let train_set: Vec<TimePatchSample> = samples
            .iter()
            .filter(|s| fold_of[&s.dimm_uid] != fold)
            .cloned()
            .collect();
        let model = train(&train_set, schema, config)?;
        for (uid, rows) in &dimm_samples {
            if fold_of[uid] != fold {
                continue;
            }
            let mut max_any = f64::NEG_INFINITY;
            let mut max_pos = f64::NEG_INFINITY;
            let mut failed = false;
            for &i in rows {
                let score = model.predict_score(&samples[i].features)?;
                all_scores.push(score);
                max_any = max_any.max(score);
                if samples[i].label {
                    failed = true;
                    max_pos = max_pos.max(score);
                }
            }
            fold_max_any[fold].push(max_any);
            if failed {
                fold_failed[fold] += 1;
                fold_max_pos[fold].push(max_pos);
            }
        }
    }

    all_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all_scores.dedup();

    let mean_f1 = |threshold: f64| -> f64 {
        let sum: f64 = (0..k_folds)
            .map(|f| {
                dimm_f1(
                    &fold_max_any[f],
                    &fold_max_pos[f],
                    fold_failed[f],
                    threshold,
                )
            })
            .sum();
        sum / k_folds as f64
    };
    Ok(choose_threshold(&all_scores, mean_f1))
}

/// Pick the operating threshold from sorted unique candidate scores.
///
/// Ties in F1 break toward the higher threshold (fewer alarms); a best F1
/// of zero prefers predicting nothing, placing the cut above every score.
/// The chosen candidate is smoothed to the midpoint of its score gap, so a
/// cleanly separated `{0.1, 0.9}` pair yields 0.5.
fn choose_threshold(all_scores: &[f64], mean_f1: impl Fn(f64) -> f64) -> f64 {
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best: Option<usize> = None; // None once predict-nothing wins
    for (i, &c) in all_scores.iter().enumerate() {
        let f1 = mean_f1(c);
        if f1 >= best_f1 {
            best_f1 = f1;
            best = Some(i);
        }
    }
    if 0.0 >= best_f1 {
        best = None;
    }
    match best {
        Some(i) => {
            let lower = if i == 0 { 0.0 } else { all_scores[i - 1] };
            (lower + all_scores[i]) / 2.0
        }
        None => {
            let top = all_scores.last().copied().unwrap_or(0.5);
            (top + 1.0) / 2.0
        }
    }
}
