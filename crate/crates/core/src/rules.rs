//! CART trees over raw feature values, and the rules read off them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::{DataView, Dataset};
use crate::error::{Error, Result};
use crate::projection::cluster_name;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeMode {
    #[default]
    MultiClass,
    OneVsRest,
}

fn default_max_depth() -> Option<usize> {
    Some(4)
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTreeConfig {
    /// `None` grows until every leaf is pure or cannot be split.
    #[serde(default = "default_max_depth")]
    pub max_depth: Option<usize>,
    #[serde(default = "one")]
    pub min_samples_leaf: usize,
    #[serde(default)]
    pub mode: TreeMode,
}

impl Default for RuleTreeConfig {
    fn default() -> Self {
        Self {
            max_depth: default_max_depth(),
            min_samples_leaf: 1,
            mode: TreeMode::MultiClass,
        }
    }
}

impl RuleTreeConfig {
    pub fn unlimited() -> Self {
        Self {
            max_depth: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_depth == Some(0) {
            return Err(Error::BadConfig("max_depth must be at least 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::BadConfig("min_samples_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

pub type ClassCounts = BTreeMap<String, usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        feature: String,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
        counts: ClassCounts,
        majority: String,
    },
    Leaf {
        counts: ClassCounts,
        majority: String,
    },
}

impl TreeNode {
    pub fn counts(&self) -> &ClassCounts {
        match self {
            TreeNode::Split { counts, .. } | TreeNode::Leaf { counts, .. } => counts,
        }
    }

    pub fn majority(&self) -> &str {
        match self {
            TreeNode::Split { majority, .. } | TreeNode::Leaf { majority, .. } => majority,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.counts().values().sum()
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

/// A fitted tree plus the column order its rows were given in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub features: Vec<String>,
    pub root: TreeNode,
}

impl DecisionTree {
    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> &str {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { majority, .. } => return majority,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let j = self.features.iter().position(|f| f == feature).expect("feature of this tree");
                    node = if row[j] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<String> {
        x.rows().into_iter().map(|r| self.predict_row(r).to_string()).collect()
    }
}

fn majority_of(counts: &ClassCounts) -> String {
    // BTreeMap order makes the first maximum the lexicographically smallest
    let mut best: Option<(&String, usize)> = None;
    for (label, &c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((label, c));
        }
    }
    best.map(|(l, _)| l.clone()).unwrap_or_default()
}

fn sum_sq(counts: &[usize]) -> f64 {
    counts.iter().map(|&c| (c * c) as f64).sum()
}

/// `n * gini` for a node with the given class counts.
fn scaled_gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        n as f64 - sum_sq(counts) / n as f64
    }
}

struct Candidate {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

struct Builder<'a> {
    x: &'a Array2<f64>,
    y: Vec<usize>,
    names: Vec<String>,
    features: &'a [String],
    cfg: RuleTreeConfig,
}

const IMPURITY_EPS: f64 = 1e-12;

impl Builder<'_> {
    fn counts(&self, rows: &[usize]) -> ClassCounts {
        let mut dense = vec![0usize; self.names.len()];
        for &r in rows {
            dense[self.y[r]] += 1;
        }
        self.names
            .iter()
            .zip(dense)
            .filter(|(_, c)| *c > 0)
            .map(|(n, c)| (n.clone(), c))
            .collect()
    }

    /// Lowest weighted Gini split of `rows`, ties to the lower feature index
    /// and then the lower threshold.
    fn best_split(&self, rows: &[usize]) -> Option<Candidate> {
        let n = rows.len();
        let msl = self.cfg.min_samples_leaf;
        let n_labels = self.names.len();
        let mut best: Option<Candidate> = None;
        let mut sorted = rows.to_vec();
        for f in 0..self.x.ncols() {
            sorted.sort_by(|&a, &b| self.x[[a, f]].total_cmp(&self.x[[b, f]]));
            let mut left = vec![0usize; n_labels];
            let mut right = vec![0usize; n_labels];
            for &r in &sorted {
                right[self.y[r]] += 1;
            }
            for i in 1..n {
                let moved = self.y[sorted[i - 1]];
                left[moved] += 1;
                right[moved] -= 1;
                let a = self.x[[sorted[i - 1], f]];
                let b = self.x[[sorted[i], f]];
                if a == b || i < msl || n - i < msl {
                    continue;
                }
                let mut threshold = a + (b - a) / 2.0;
                if threshold >= b {
                    // adjacent floats: keep the split on the left value
                    threshold = a;
                }
                let impurity = (scaled_gini(&left, i) + scaled_gini(&right, n - i)) / n as f64;
                if best.as_ref().is_none_or(|c| impurity < c.impurity - IMPURITY_EPS) {
                    best = Some(Candidate {
                        feature: f,
                        threshold,
                        impurity,
                    });
                }
            }
        }
        best
    }

    fn grow(&self, rows: Vec<usize>, depth: usize) -> TreeNode {
        let counts = self.counts(&rows);
        let majority = majority_of(&counts);
        let at_limit = self.cfg.max_depth.is_some_and(|d| depth >= d);
        if counts.len() <= 1 || at_limit || rows.len() < 2 * self.cfg.min_samples_leaf {
            return TreeNode::Leaf { counts, majority };
        }
        let Some(split) = self.best_split(&rows) else {
            return TreeNode::Leaf { counts, majority };
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&row| self.x[[row, split.feature]] <= split.threshold);
        TreeNode::Split {
            feature: self.features[split.feature].clone(),
            threshold: split.threshold,
            left: Box::new(self.grow(l, depth + 1)),
            right: Box::new(self.grow(r, depth + 1)),
            counts,
            majority,
        }
    }
}

/// Greedy CART on weighted Gini impurity.
///
/// Thresholds are midpoints between consecutive distinct values; a row goes
/// left when its value is `<=` the threshold.
pub fn fit_cart(x: &Array2<f64>, features: &[String], labels: &[String], cfg: &RuleTreeConfig) -> Result<DecisionTree> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("no rows to fit a tree on".into()));
    }
    if x.nrows() != labels.len() || x.ncols() != features.len() {
        return Err(Error::ShapeError(format!(
            "{}x{} matrix for {} labels and {} features",
            x.nrows(),
            x.ncols(),
            labels.len(),
            features.len()
        )));
    }
    let names: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let y = labels
        .iter()
        .map(|l| names.binary_search(l).expect("label collected above"))
        .collect();
    let builder = Builder {
        x,
        y,
        names,
        features,
        cfg: *cfg,
    };
    let root = builder.grow((0..x.nrows()).collect(), 0);
    Ok(DecisionTree {
        features: features.to_vec(),
        root,
    })
}

pub fn rest_label(label: &str) -> String {
    format!("NOT {label}")
}

/// One binary tree per distinct label, keyed by label.
pub fn fit_one_vs_rest(
    x: &Array2<f64>,
    features: &[String],
    labels: &[String],
    cfg: &RuleTreeConfig,
) -> Result<BTreeMap<String, DecisionTree>> {
    let distinct: std::collections::BTreeSet<&String> = labels.iter().collect();
    distinct
        .into_iter()
        .map(|target| {
            let rest = rest_label(target);
            let binary: Vec<String> = labels
                .iter()
                .map(|l| if l == target { l.clone() } else { rest.clone() })
                .collect();
            Ok((target.clone(), fit_cart(x, features, &binary, cfg)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: String,
    pub op: Comparison,
    pub threshold: f64,
}

impl Condition {
    fn holds(&self, v: f64) -> bool {
        match self.op {
            Comparison::Le => v <= self.threshold,
            Comparison::Gt => v > self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub conditions: Vec<Condition>,
    pub label: String,
    /// Training rows reaching the leaf.
    pub coverage: usize,
    /// Share of covered rows carrying `label`.
    pub purity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub features: Vec<String>,
    pub rules: Vec<Rule>,
}

/// One rule per leaf, left subtrees first.
pub fn extract_rules(tree: &DecisionTree) -> RuleSet {
    fn walk(node: &TreeNode, path: &mut Vec<Condition>, out: &mut Vec<Rule>) {
        match node {
            TreeNode::Leaf { counts, majority } => {
                let n: usize = counts.values().sum();
                out.push(Rule {
                    conditions: path.clone(),
                    label: majority.clone(),
                    coverage: n,
                    purity: if n == 0 { 0.0 } else { counts[majority] as f64 / n as f64 },
                });
            }
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                for (op, child) in [(Comparison::Le, left), (Comparison::Gt, right)] {
                    path.push(Condition {
                        feature: feature.clone(),
                        op,
                        threshold: *threshold,
                    });
                    walk(child, path, out);
                    path.pop();
                }
            }
        }
    }
    let mut rules = Vec::new();
    walk(&tree.root, &mut Vec::new(), &mut rules);
    RuleSet {
        features: tree.features.clone(),
        rules,
    }
}

impl RuleSet {
    /// Index of the rule covering `row`.
    pub fn matching_rule(&self, row: ArrayView1<'_, f64>) -> Option<usize> {
        self.rules.iter().position(|rule| {
            rule.conditions.iter().all(|c| {
                let j = self.features.iter().position(|f| *f == c.feature).expect("feature of this ruleset");
                c.holds(row[j])
            })
        })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<Option<String>> {
        x.rows()
            .into_iter()
            .map(|r| self.matching_rule(r).map(|i| self.rules[i].label.clone()))
            .collect()
    }

    /// Number of rows of `x` covered by each rule.
    pub fn coverage(&self, x: &Array2<f64>) -> Vec<usize> {
        let mut out = vec![0; self.rules.len()];
        for r in x.rows() {
            if let Some(i) = self.matching_rule(r) {
                out[i] += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderFormat {
    #[default]
    Text,
    Structured,
}

impl std::str::FromStr for RenderFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(RenderFormat::Text),
            "structured" => Ok(RenderFormat::Structured),
            other => Err(Error::BadConfig(format!("unknown format {other:?}"))),
        }
    }
}

/// One line per rule: `IF f <= t AND g > u THEN label (n=.., purity=..)`.
pub fn render_text(rules: &RuleSet) -> String {
    let mut out = String::new();
    for rule in &rules.rules {
        let cond = if rule.conditions.is_empty() {
            "TRUE".to_string()
        } else {
            rule.conditions
                .iter()
                .map(|c| {
                    let op = match c.op {
                        Comparison::Le => "≤",
                        Comparison::Gt => ">",
                    };
                    format!("{} {} {}", c.feature, op, c.threshold)
                })
                .collect::<Vec<_>>()
                .join(" AND ")
        };
        let _ = writeln!(
            out,
            "IF {cond} THEN {} (n={}, purity={:.3})",
            rule.label, rule.coverage, rule.purity
        );
    }
    out
}

/// The tree as nested `{feature, threshold, left, right, counts, majority}`.
pub fn render_structured(tree: &DecisionTree) -> serde_json::Value {
    serde_json::to_value(&tree.root).expect("tree serializes")
}

pub fn render(tree: &DecisionTree, format: RenderFormat) -> String {
    match format {
        RenderFormat::Text => render_text(&extract_rules(tree)),
        RenderFormat::Structured => {
            serde_json::to_string_pretty(&render_structured(tree)).expect("json value serializes")
        }
    }
}

/// Raw feature rows of the view with their explanation labels: known rows
/// keep their class name, unknown rows get `cluster_<i>`.
pub fn build_rule_targets(
    dataset: &Dataset,
    view: &DataView,
    unknown_labels: &[usize],
) -> Result<(Array2<f64>, Vec<String>)> {
    if unknown_labels.len() != view.n_unknown() {
        return Err(Error::StaleResult(format!(
            "{} cluster labels for {} unknown rows",
            unknown_labels.len(),
            view.n_unknown()
        )));
    }
    if view.n_known() == 0 && view.n_unknown() == 0 {
        return Err(Error::InvalidPartition("view has no rows".into()));
    }
    let x = dataset.feature_rows(&view.features, &view.row_origin)?;
    let labels = view
        .y_known
        .iter()
        .map(|&c| view.known_classes[c].clone())
        .chain(unknown_labels.iter().map(|&c| cluster_name(c)))
        .collect();
    Ok((x, labels))
}
