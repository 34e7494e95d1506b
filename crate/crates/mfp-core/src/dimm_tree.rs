//! Time-point prediction: a decision tree whose impurity is computed over
//! the set of unique DIMMs reaching a node rather than over samples, rule
//! extraction from its positive leaves, and per-event streaming matching.
//!
//! Splitting on `(feature, value)` sends a DIMM left when *any* of its
//! samples carries that exact value. Duplicating samples of a DIMM therefore
//! cannot change the tree: only DIMM membership enters the impurity.
//!
//! Tie handling, in scan order: candidates are examined feature index
//! ascending, values descending within a feature, and only a strictly better
//! weighted Gini (beyond 1e-12) displaces the incumbent. Preferring the
//! larger value on ties orients positive patterns onto the contains branch,
//! which keeps extracted rules in the natural `feature = value` form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bsfe::{bsfe_2d, Pooling};
use crate::ce_model::{CeEvent, DimmUid, ErrorType};
use crate::error::{Error, Result};
use crate::hierarchy::FeatureSchema;

const RULE_FORMAT_VERSION: u32 = 1;
const GINI_TOLERANCE: f64 = 1e-12;

/// One featurized CE event with its DIMM's label.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePointSample {
    pub dimm_uid: DimmUid,
    pub features: Vec<f64>,
    /// Whether the DIMM is faulty within the training horizon.
    pub dimm_label: bool,
}

/// Feature layout of time-point samples: bit-level descriptors of the event
/// plus the CE type as one categorical feature.
pub fn time_point_schema(pooling: &[Pooling]) -> FeatureSchema {
    let mut names: Vec<String> = crate::bsfe::bsfe_2d_feature_names(pooling)
        .into_iter()
        .map(|n| format!("bit.{n}"))
        .collect();
    names.push("ce_type".to_string());
    FeatureSchema { names }
}

/// Descriptor vector of a single event: 2d features of its DQ-Beat matrix
/// (all lines pooled) followed by the CE type code.
pub fn event_features(event: &CeEvent, pooling: &[Pooling]) -> Result<Vec<f64>> {
    let mut features = bsfe_2d(&event.bit_matrix.to_sparse(), pooling, false)?.concat();
    features.push(event.error_type.code() as f64);
    Ok(features)
}

/// Featurize a training event stream against the faulty-DIMM set.
/// Descriptor vectors are memoized by bit mask and CE type.
pub fn build_time_point_samples(
    events: &[CeEvent],
    faulty: &BTreeSet<DimmUid>,
    pooling: &[Pooling],
) -> Result<Vec<TimePointSample>> {
    let mut cache: BTreeMap<(u32, ErrorType), Vec<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        let key = (e.bit_matrix.mask(), e.error_type);
        if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(key) {
            slot.insert(event_features(e, pooling)?);
        }
        out.push(TimePointSample {
            dimm_uid: e.dimm_uid.clone(),
            features: cache[&key].clone(),
            dimm_label: faulty.contains(&e.dimm_uid),
        });
    }
    Ok(out)
}

/// Gini impurity of a DIMM set given its faulty/healthy counts; an empty
/// set is pure by convention.
pub fn dimm_gini(n_faulty: usize, n_healthy: usize) -> f64 {
    let total = n_faulty + n_healthy;
    if total == 0 {
        return 0.0;
    }
    let p = n_faulty as f64 / total as f64;
    let q = n_healthy as f64 / total as f64;
    1.0 - p * p - q * q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    /// Purity ratio: a node whose majority/minority DIMM ratio exceeds this
    /// becomes a leaf (a class of size zero counts as infinite ratio).
    pub theta: f64,
    pub max_depth: usize,
    /// Split candidates per feature, most frequent values first.
    pub max_values_per_feature: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            theta: 50.0,
            max_depth: 4,
            max_values_per_feature: 64,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.theta.is_finite() || self.theta <= 0.0 {
            return Err(Error::config("theta must be positive"));
        }
        if self.max_depth == 0 || self.max_values_per_feature == 0 {
            return Err(Error::config(
                "max_depth and max_values_per_feature must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimmNode {
    Split {
        feature: u32,
        value: f64,
        /// DIMMs with at least one sample equal to `value` at `feature`.
        contains: Box<DimmNode>,
        not_contains: Box<DimmNode>,
    },
    Leaf {
        label: bool,
        n_faulty_dimms: usize,
        n_healthy_dimms: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimmTree {
    pub version: u32,
    pub config: TreeConfig,
    pub schema: FeatureSchema,
    pub root: DimmNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Contains,
    NotContains,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Literal {
    pub feature: u32,
    pub feature_name: String,
    pub value: f64,
    pub polarity: Polarity,
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.polarity {
            Polarity::Contains => write!(f, "{} = {}", self.feature_name, self.value),
            Polarity::NotContains => write!(f, "{} != {}", self.feature_name, self.value),
        }
    }
}

/// Conjunction of literals; an empty conjunction matches every event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub literals: Vec<Literal>,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.literals.is_empty() {
            return f.write_str("(always)");
        }
        for (i, lit) in self.literals.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            write!(f, "{lit}")?;
        }
        Ok(())
    }
}

/// Fault patterns read off the positive leaves of a [`DimmTree`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleBase {
    pub version: u32,
    pub schema: FeatureSchema,
    pub rules: Vec<Rule>,
}

impl RuleBase {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rule base serialization is infallible")
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let rb: RuleBase =
            serde_json::from_str(raw).map_err(|e| Error::data(format!("rule base parse: {e}")))?;
        if rb.version != RULE_FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported rule base format version {}",
                rb.version
            )));
        }
        Ok(rb)
    }

    /// Human-readable rendering, one rule per line.
    pub fn render_text(&self) -> String {
        if self.rules.is_empty() {
            return "(no fault rules)\n".to_string();
        }
        let mut out = String::new();
        for (i, rule) in self.rules.iter().enumerate() {
            out.push_str(&format!("rule {}: {}\n", i + 1, rule));
        }
        out
    }
}

struct DimmEntry {
    label: bool,
    /// Indices into the sample slice.
    rows: Vec<usize>,
}

struct TreeBuilder<'a> {
    samples: &'a [TimePointSample],
    dimms: Vec<DimmEntry>,
    n_features: usize,
    config: &'a TreeConfig,
}

impl<'a> TreeBuilder<'a> {
    fn leaf(&self, node_dimms: &[usize]) -> DimmNode {
        let n_faulty = node_dimms.iter().filter(|&&d| self.dimms[d].label).count();
        let n_healthy = node_dimms.len() - n_faulty;
        DimmNode::Leaf {
            label: n_faulty >= n_healthy,
            n_faulty_dimms: n_faulty,
            n_healthy_dimms: n_healthy,
        }
    }

    fn build(&self, node_dimms: Vec<usize>, depth: usize) -> DimmNode {
        let n_faulty = node_dimms.iter().filter(|&&d| self.dimms[d].label).count();
        let n_healthy = node_dimms.len() - n_faulty;
        let pure_enough = n_faulty == 0
            || n_healthy == 0
            || n_faulty as f64 / n_healthy as f64 > self.config.theta
            || n_healthy as f64 / n_faulty as f64 > self.config.theta;
        if pure_enough || depth >= self.config.max_depth || node_dimms.len() <= 1 {
            return self.leaf(&node_dimms);
        }

        let parent = dimm_gini(n_faulty, n_healthy);
        let mut best: Option<(f64, usize, f64)> = None; // (weighted, feature, value)
        for feature in 0..self.n_features {
            for (value, contains_set) in self.candidate_values(&node_dimms, feature) {
                let l_faulty = contains_set
                    .iter()
                    .filter(|&&d| self.dimms[d].label)
                    .count();
                let l_total = contains_set.len();
                let r_faulty = n_faulty - l_faulty;
                let r_total = node_dimms.len() - l_total;
                let n = node_dimms.len() as f64;
                let weighted = (l_total as f64 / n) * dimm_gini(l_faulty, l_total - l_faulty)
                    + (r_total as f64 / n) * dimm_gini(r_faulty, r_total - r_faulty);
                let incumbent = best.map_or(parent, |(w, _, _)| w);
                if weighted < incumbent - GINI_TOLERANCE {
                    best = Some((weighted, feature, value));
                }
            }
        }

        let Some((_, feature, value)) = best else {
            // No valid split: no candidate strictly reduces impurity.
            return self.leaf(&node_dimms);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = node_dimms
            .into_iter()
            .partition(|&d| self.dimm_contains(d, feature, value));
        DimmNode::Split {
            feature: feature as u32,
            value,
            contains: Box::new(self.build(left, depth + 1)),
            not_contains: Box::new(self.build(right, depth + 1)),
        }
    }

    fn dimm_contains(&self, dimm: usize, feature: usize, value: f64) -> bool {
        self.dimms[dimm]
            .rows
            .iter()
            .any(|&r| self.samples[r].features[feature] == value)
    }

    /// Distinct observed values of `feature` within the node, capped by
    /// sample frequency, returned with their contains-DIMM sets in
    /// descending value order.
    fn candidate_values(&self, node_dimms: &[usize], feature: usize) -> Vec<(f64, Vec<usize>)> {
        struct Candidate {
            count: usize,
            dimms: Vec<usize>,
        }
        let mut by_value: Vec<(f64, Candidate)> = Vec::new();
        for &d in node_dimms {
            for &r in &self.dimms[d].rows {
                let v = self.samples[r].features[feature];
                match by_value.binary_search_by(|(x, _)| x.total_cmp(&v)) {
                    Ok(i) => {
                        let c = &mut by_value[i].1;
                        c.count += 1;
                        if c.dimms.last() != Some(&d) {
                            c.dimms.push(d);
                        }
                    }
                    Err(i) => by_value.insert(
                        i,
                        (
                            v,
                            Candidate {
                                count: 1,
                                dimms: vec![d],
                            },
                        ),
                    ),
                }
            }
        }
        let mut list: Vec<(f64, Candidate)> = by_value;
        if list.len() > self.config.max_values_per_feature {
            list.sort_by(|a, b| b.1.count.cmp(&a.1.count).then(a.0.total_cmp(&b.0)));
            list.truncate(self.config.max_values_per_feature);
            list.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        list.into_iter()
            .rev() // descending value order
            .map(|(v, c)| (v, c.dimms))
            .collect()
    }
}

/// Grow the DIMM-centric tree over featurized events.
pub fn build_tree(samples: &[TimePointSample], config: &TreeConfig) -> Result<DimmTree> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::data("tree training requires at least one sample"));
    }
    let n_features = samples[0].features.len();
    if samples.iter().any(|s| s.features.len() != n_features) {
        return Err(Error::data(
            "inconsistent feature lengths in tree training data",
        ));
    }
    if samples
        .iter()
        .any(|s| s.features.iter().any(|f| !f.is_finite()))
    {
        return Err(Error::data(
            "non-finite feature value in tree training data",
        ));
    }

    let mut dimm_index: BTreeMap<&DimmUid, usize> = BTreeMap::new();
    let mut dimms: Vec<DimmEntry> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let entry = match dimm_index.get(&s.dimm_uid) {
            Some(&d) => {
                if dimms[d].label != s.dimm_label {
                    return Err(Error::data(format!(
                        "conflicting labels for DIMM {}",
                        s.dimm_uid
                    )));
                }
                d
            }
            None => {
                dimm_index.insert(&s.dimm_uid, dimms.len());
                dimms.push(DimmEntry {
                    label: s.dimm_label,
                    rows: Vec::new(),
                });
                dimms.len() - 1
            }
        };
        dimms[entry].rows.push(i);
    }

    let builder = TreeBuilder {
        samples,
        n_features,
        config,
        dimms,
    };
    let all: Vec<usize> = (0..builder.dimms.len()).collect();
    let root = builder.build(all, 0);
    Ok(DimmTree {
        version: RULE_FORMAT_VERSION,
        config: config.clone(),
        schema: FeatureSchema {
            names: (0..n_features).map(|i| format!("f{i}")).collect(),
        },
        root,
    })
}

/// As [`build_tree`], recording feature names into the artifact.
pub fn build_tree_with_schema(
    samples: &[TimePointSample],
    schema: &FeatureSchema,
    config: &TreeConfig,
) -> Result<DimmTree> {
    if samples.iter().any(|s| s.features.len() != schema.len()) {
        return Err(Error::SchemaMismatch {
            expected: format!("{} features", schema.len()),
            found: "differing sample feature length".to_string(),
        });
    }
    let mut tree = build_tree(samples, config)?;
    tree.schema = schema.clone();
    Ok(tree)
}

impl DimmTree {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serialization is infallible")
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let tree: DimmTree =
            serde_json::from_str(raw).map_err(|e| Error::data(format!("tree parse: {e}")))?;
        if tree.version != RULE_FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported tree format version {}",
                tree.version
            )));
        }
        Ok(tree)
    }

    /// Route a DIMM (all its sample feature rows) to its leaf decision.
    /// Split membership is existential over the rows, exactly as during
    /// training.
    pub fn route_dimm<R: AsRef<[f64]>>(&self, rows: &[R]) -> bool {
        let mut node = &self.root;
        loop {
            match node {
                DimmNode::Leaf { label, .. } => return *label,
                DimmNode::Split {
                    feature,
                    value,
                    contains,
                    not_contains,
                } => {
                    let has = rows.iter().any(|r| r.as_ref()[*feature as usize] == *value);
                    node = if has { contains } else { not_contains };
                }
            }
        }
    }
}

/// Read the branches ending in a positive leaf off into a rule base.
pub fn extract_rules(tree: &DimmTree) -> RuleBase {
    fn walk(node: &DimmNode, path: &mut Vec<Literal>, schema: &FeatureSchema, out: &mut Vec<Rule>) {
        match node {
            DimmNode::Leaf { label, .. } => {
                if *label {
                    out.push(Rule {
                        literals: path.clone(),
                    });
                }
            }
            DimmNode::Split {
                feature,
                value,
                contains,
                not_contains,
            } => {
                let name = schema.names[*feature as usize].clone();
                path.push(Literal {
                    feature: *feature,
                    feature_name: name.clone(),
                    value: *value,
                    polarity: Polarity::Contains,
                });
                walk(contains, path, schema, out);
                path.pop();
                path.push(Literal {
                    feature: *feature,
                    feature_name: name,
                    value: *value,
                    polarity: Polarity::NotContains,
                });
                walk(not_contains, path, schema, out);
                path.pop();
            }
        }
    }
    let mut rules = Vec::new();
    walk(&tree.root, &mut Vec::new(), &tree.schema, &mut rules);
    RuleBase {
        version: RULE_FORMAT_VERSION,
        schema: tree.schema.clone(),
        rules,
    }
}

/// Match one event's features against the rule base: true when some rule's
/// literals all hold for this single event. Stateless per event; equality
/// is exact (descriptor values are small dyadic rationals computed by one
/// code path).
pub fn match_event(rule_base: &RuleBase, features: &[f64]) -> Result<bool> {
    if features.len() != rule_base.schema.len() {
        return Err(Error::SchemaMismatch {
            expected: format!("{} features", rule_base.schema.len()),
            found: format!("{} features", features.len()),
        });
    }
    Ok(rule_base.rules.iter().any(|rule| {
        rule.literals.iter().all(|lit| {
            let x = features[lit.feature as usize];
            match lit.polarity {
                Polarity::Contains => x == lit.value,
                Polarity::NotContains => x != lit.value,
            }
        })
    }))
}

/// Match a whole DIMM's event set with training-time literal semantics:
/// `contains` holds when some event carries the value, `not-contains` when
/// none does. This reproduces the tree's routing for every training DIMM;
/// the per-event [`match_event`] is the streaming approximation of it.
pub fn match_dimm_bulk<R: AsRef<[f64]>>(rule_base: &RuleBase, rows: &[R]) -> Result<bool> {
    for r in rows {
        if r.as_ref().len() != rule_base.schema.len() {
            return Err(Error::SchemaMismatch {
                expected: format!("{} features", rule_base.schema.len()),
                found: format!("{} features", r.as_ref().len()),
            });
        }
    }
    Ok(rule_base.rules.iter().any(|rule| {
        rule.literals.iter().all(|lit| {
            let has = rows
                .iter()
                .any(|r| r.as_ref()[lit.feature as usize] == lit.value);
            match lit.polarity {
                Polarity::Contains => has,
                Polarity::NotContains => !has,
            }
        })
    }))
}

/// Common surface for the time-point predictors (the rule base and the
/// statistical baselines), letting the replay harness treat them uniformly.
pub trait TimePointPredictor: Sync {
    fn name(&self) -> &'static str;
    fn predict_event(&self, event: &CeEvent) -> Result<bool>;
}

/// Streaming predictor wrapping a rule base.
pub struct RuleBasePredictor {
    rule_base: RuleBase,
    pooling: Vec<Pooling>,
}

impl RuleBasePredictor {
    pub fn new(rule_base: RuleBase, pooling: Vec<Pooling>) -> Result<Self> {
        let expected = time_point_schema(&pooling);
        if expected.names != rule_base.schema.names {
            return Err(Error::SchemaMismatch {
                expected: expected.fingerprint(),
                found: rule_base.schema.fingerprint(),
            });
        }
        Ok(RuleBasePredictor { rule_base, pooling })
    }
}

impl TimePointPredictor for RuleBasePredictor {
    fn name(&self) -> &'static str {
        "time_point"
    }

    fn predict_event(&self, event: &CeEvent) -> Result<bool> {
        let features = event_features(event, &self.pooling)?;
        match_event(&self.rule_base, &features)
    }
}
