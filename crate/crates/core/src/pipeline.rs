//! Request types shared by the HTTP service and the CLI, and the glue that
//! turns a request into a model run, a t-SNE input or a rule document.

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clustering::{ari, clustering_accuracy, kmeans_fit, nmi, spectral_fit, KmeansConfig, SpectralConfig};
use crate::dataset::{materialize_view, ClassStatus, Dataset, DataView, FeatureScale, SelectionState};
use crate::error::{Error, Result};
use crate::ncd::{run_baseline, run_tabular_ncd, BaselineNcdConfig, TabularNcdConfig, TrainingHistory};
use crate::nn::Mlp;
use crate::progress::{ProgressSink, ProgressTracker};
use crate::projection::{
    color_points, feature_fingerprint, ClusterOverlay, PlotPayload, RowFilter, TsneEmbedding, TsneRequest,
    TsneSource,
};
use crate::rules::{
    build_rule_targets, extract_rules, fit_cart, fit_one_vs_rest, render, render_structured, DecisionTree,
    RenderFormat, RuleSet, RuleTreeConfig, TreeMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    TabularNcd,
    Kmeans,
    Spectral,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::TabularNcd => "tabular_ncd",
            ModelKind::Kmeans => "kmeans",
            ModelKind::Spectral => "spectral",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "tabular_ncd" => Ok(ModelKind::TabularNcd),
            "kmeans" => Ok(ModelKind::Kmeans),
            "spectral" => Ok(ModelKind::Spectral),
            other => Err(Error::BadConfig(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ModelConfig {
    Baseline(BaselineNcdConfig),
    TabularNcd(TabularNcdConfig),
    Kmeans(KmeansConfig),
    Spectral(SpectralConfig),
}

impl ModelConfig {
    /// Parses `value` as the config of `kind`, applying `seed` when given.
    pub fn parse(kind: ModelKind, value: &serde_json::Value, seed: Option<u64>) -> Result<Self> {
        fn de<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
            serde_json::from_value(v.clone()).map_err(|e| Error::BadConfig(e.to_string()))
        }
        let mut cfg = match kind {
            ModelKind::Baseline => ModelConfig::Baseline(de(value)?),
            ModelKind::TabularNcd => ModelConfig::TabularNcd(de(value)?),
            ModelKind::Kmeans => ModelConfig::Kmeans(de(value)?),
            ModelKind::Spectral => ModelConfig::Spectral(de(value)?),
        };
        if let Some(seed) = seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Baseline(_) => ModelKind::Baseline,
            ModelConfig::TabularNcd(_) => ModelKind::TabularNcd,
            ModelConfig::Kmeans(_) => ModelKind::Kmeans,
            ModelConfig::Spectral(_) => ModelKind::Spectral,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            ModelConfig::Baseline(c) => c.k,
            ModelConfig::TabularNcd(c) => c.k,
            ModelConfig::Kmeans(c) => c.k,
            ModelConfig::Spectral(c) => c.k,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelConfig::Baseline(c) => c.train.seed,
            ModelConfig::TabularNcd(c) => c.train.seed,
            ModelConfig::Kmeans(c) => c.seed,
            ModelConfig::Spectral(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ModelConfig::Baseline(c) => c.train.seed = seed,
            ModelConfig::TabularNcd(c) => c.train.seed = seed,
            ModelConfig::Kmeans(c) => c.seed = seed,
            ModelConfig::Spectral(c) => c.seed = seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Baseline(c) => c.validate(),
            ModelConfig::TabularNcd(c) => c.validate(),
            ModelConfig::Kmeans(c) => c.validate(),
            ModelConfig::Spectral(c) => c.validate(),
        }
    }
}

/// Body of a training request; the model kind travels separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub selection: SelectionState,
    #[serde(default = "empty_object")]
    pub config: serde_json::Value,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<Metrics> {
    Ok(Metrics {
        acc: clustering_accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        ari: ari(pred, truth)?,
    })
}

/// Everything produced by one model run, plus what is needed to re-run it.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub dataset_id: String,
    pub selection: SelectionState,
    pub config: ModelConfig,
    pub features: Vec<String>,
    pub standardization: Vec<FeatureScale>,
    pub known_rows: Vec<usize>,
    pub unknown_rows: Vec<usize>,
    /// Cluster index per entry of `unknown_rows`.
    pub unknown_labels: Vec<usize>,
    /// Known class index per entry of `known_rows`, for NCD models.
    pub known_predictions: Option<Vec<usize>>,
    pub known_classes: Vec<String>,
    /// Against the true classes of the unknown rows.
    pub metrics: Metrics,
    pub history: Option<TrainingHistory>,
    pub inertia: Option<f64>,
    pub model: Option<Mlp>,
}

/// Serializable part of a [`RunResult`], without the network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset_id: String,
    pub kind: ModelKind,
    pub selection: SelectionState,
    pub config: ModelConfig,
    pub known_rows: Vec<usize>,
    pub unknown_rows: Vec<usize>,
    pub unknown_labels: Vec<usize>,
    pub known_predictions: Option<Vec<usize>>,
    pub known_classes: Vec<String>,
    pub metrics: Metrics,
    pub history: Option<TrainingHistory>,
    pub inertia: Option<f64>,
}

impl RunResult {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            dataset_id: self.dataset_id.clone(),
            kind: self.config.kind(),
            selection: self.selection.clone(),
            config: self.config.clone(),
            known_rows: self.known_rows.clone(),
            unknown_rows: self.unknown_rows.clone(),
            unknown_labels: self.unknown_labels.clone(),
            known_predictions: self.known_predictions.clone(),
            known_classes: self.known_classes.clone(),
            metrics: self.metrics,
            history: self.history.clone(),
            inertia: self.inertia,
        }
    }

    /// Latent coordinates of arbitrary dataset rows under the trained trunk.
    pub fn embed_rows(&self, dataset: &Dataset, rows: &[usize]) -> Result<Array2<f64>> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::StaleResult(format!("{} results have no latent space", self.config.kind().as_str())))?;
        let raw = dataset.feature_rows(&self.features, rows)?;
        let x = Array2::from_shape_fn(raw.dim(), |(i, j)| self.standardization[j].apply(raw[[i, j]]));
        model.embed(&x)
    }
}

/// Rebuilds a run from its saved summary and weights against the same data.
pub fn restore_run(dataset: &Dataset, summary: &RunSummary, model: Option<Mlp>) -> Result<RunResult> {
    let view = materialize_view(dataset, &summary.selection)?;
    if view.unknown_rows() != summary.unknown_rows.as_slice() || view.known_rows() != summary.known_rows.as_slice() {
        return Err(Error::StaleResult("dataset rows no longer match the saved result".into()));
    }
    if summary.unknown_labels.len() != summary.unknown_rows.len() {
        return Err(Error::StaleResult("saved labels do not match the saved rows".into()));
    }
    Ok(RunResult {
        dataset_id: dataset.id.clone(),
        selection: summary.selection.clone(),
        config: summary.config.clone(),
        features: view.features,
        standardization: view.standardization,
        known_rows: summary.known_rows.clone(),
        unknown_rows: summary.unknown_rows.clone(),
        unknown_labels: summary.unknown_labels.clone(),
        known_predictions: summary.known_predictions.clone(),
        known_classes: summary.known_classes.clone(),
        metrics: summary.metrics,
        history: summary.history.clone(),
        inertia: summary.inertia,
        model,
    })
}

/// Materializes `selection` on `dataset` and runs `config` on it.
pub fn run_model(
    dataset: &Dataset,
    selection: &SelectionState,
    config: &ModelConfig,
    progress: &dyn ProgressSink,
) -> Result<RunResult> {
    config.validate()?;
    let view = materialize_view(dataset, selection)?;
    let mut result = RunResult {
        dataset_id: dataset.id.clone(),
        selection: selection.clone(),
        config: config.clone(),
        features: view.features.clone(),
        standardization: view.standardization.clone(),
        known_rows: view.known_rows().to_vec(),
        unknown_rows: view.unknown_rows().to_vec(),
        unknown_labels: Vec::new(),
        known_predictions: None,
        known_classes: view.known_classes.clone(),
        metrics: Metrics {
            acc: 0.0,
            nmi: 0.0,
            ari: 0.0,
        },
        history: None,
        inertia: None,
        model: None,
    };
    match config {
        ModelConfig::Baseline(cfg) => absorb_ncd(&mut result, run_baseline(&view, cfg, progress)?),
        ModelConfig::TabularNcd(cfg) => absorb_ncd(&mut result, run_tabular_ncd(&view, cfg, progress)?),
        ModelConfig::Kmeans(cfg) => {
            let mut tracker = ProgressTracker::new(progress, 1);
            tracker.start()?;
            let a = kmeans_fit(&view.x_unknown, cfg)?;
            tracker.step()?;
            result.unknown_labels = a.labels;
            result.inertia = a.inertia;
        }
        ModelConfig::Spectral(cfg) => {
            let mut tracker = ProgressTracker::new(progress, 1);
            tracker.start()?;
            let a = spectral_fit(&view.x_unknown, cfg)?;
            tracker.step()?;
            result.unknown_labels = a.labels;
        }
    }
    result.metrics = evaluate(&result.unknown_labels, &view.y_unknown)?;
    Ok(result)
}

fn absorb_ncd(result: &mut RunResult, ncd: crate::ncd::NcdResult) {
    result.unknown_labels = ncd.unknown_labels;
    result.known_predictions = Some(ncd.known_predictions);
    result.history = Some(ncd.history);
    result.model = Some(ncd.model);
}

// ---------------------------------------------------------------------------
// t-SNE plumbing
// ---------------------------------------------------------------------------

/// Body of a t-SNE request: what to project and how to color it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneJob {
    pub selection: SelectionState,
    #[serde(default = "raw_features")]
    pub source: TsneSource,
    #[serde(default = "all_included")]
    pub row_filter: RowFilter,
    #[serde(default = "default_perplexity")]
    pub perplexity: f64,
    #[serde(default = "default_n_iter")]
    pub n_iter: usize,
    #[serde(default)]
    pub seed: u64,
    /// Result whose clusters color the unknown rows.
    #[serde(default)]
    pub color_by: Option<String>,
}

fn raw_features() -> TsneSource {
    TsneSource::RawFeatures
}
fn all_included() -> RowFilter {
    RowFilter::AllIncluded
}
fn default_perplexity() -> f64 {
    30.0
}
fn default_n_iter() -> usize {
    1000
}

/// Dataset rows projected for `filter`, in dataset order.
pub fn projected_rows(view: &DataView, filter: RowFilter) -> Vec<usize> {
    let mut rows = match filter {
        RowFilter::AllIncluded => view.row_origin.clone(),
        RowFilter::UnknownOnly => view.unknown_rows().to_vec(),
    };
    rows.sort_unstable();
    rows
}

/// The cache request, the matrix to embed and its dataset rows.
///
/// `model` must be the result named by a latent source.
pub fn tsne_input(
    dataset: &Dataset,
    job: &TsneJob,
    model: Option<&RunResult>,
) -> Result<(TsneRequest, Array2<f64>, Vec<usize>)> {
    let view = materialize_view(dataset, &job.selection)?;
    let rows = projected_rows(&view, job.row_filter);
    let (features, x) = match &job.source {
        TsneSource::RawFeatures => {
            let raw = dataset.feature_rows(&view.features, &rows)?;
            let x = Array2::from_shape_fn(raw.dim(), |(i, j)| view.standardization[j].apply(raw[[i, j]]));
            (view.features.clone(), x)
        }
        TsneSource::Latent { model_id } => {
            let model = model.ok_or_else(|| Error::StaleResult(format!("no model {model_id:?}")))?;
            if model.dataset_id != dataset.id {
                return Err(Error::StaleResult(format!("model {model_id:?} belongs to another dataset")));
            }
            (model.features.clone(), model.embed_rows(dataset, &rows)?)
        }
    };
    let req = TsneRequest {
        dataset_id: dataset.id.clone(),
        source: job.source.clone(),
        feature_fingerprint: feature_fingerprint(&features),
        row_filter: job.row_filter,
        perplexity: job.perplexity,
        n_iter: job.n_iter,
        seed: job.seed,
    };
    Ok((req, x, rows))
}

/// Colors `embedding` by the job's selection and optional cluster result.
pub fn tsne_payload(
    dataset: &Dataset,
    embedding: &TsneEmbedding,
    selection: &SelectionState,
    clusters: Option<&RunResult>,
) -> Result<PlotPayload> {
    let overlay = clusters.map(|r| ClusterOverlay {
        rows: &r.unknown_rows,
        labels: &r.unknown_labels,
    });
    color_points(embedding, dataset, selection, overlay)
}

// ---------------------------------------------------------------------------
// Rules plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulesDocument {
    pub mode: TreeMode,
    /// One entry per tree: `"all"` in multi-class mode, else the label.
    pub trees: BTreeMap<String, TreeDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub rules: RuleSet,
    pub text: String,
    pub tree: serde_json::Value,
    pub depth: usize,
    pub n_leaves: usize,
}

pub const MULTI_CLASS_TREE: &str = "all";

fn tree_document(tree: &DecisionTree) -> TreeDocument {
    TreeDocument {
        rules: extract_rules(tree),
        text: render(tree, RenderFormat::Text),
        tree: render_structured(tree),
        depth: tree.root.depth(),
        n_leaves: tree.root.n_leaves(),
    }
}

/// Fits explanation trees for a run's known classes and clusters.
pub fn explain_run(dataset: &Dataset, run: &RunSummary, cfg: &RuleTreeConfig) -> Result<RulesDocument> {
    cfg.validate()?;
    let view = materialize_view(dataset, &run.selection)?;
    if view.unknown_rows() != run.unknown_rows.as_slice() {
        return Err(Error::StaleResult("selection no longer matches the result rows".into()));
    }
    let (x, labels) = build_rule_targets(dataset, &view, &run.unknown_labels)?;
    let trees = match cfg.mode {
        TreeMode::MultiClass => {
            let tree = fit_cart(&x, &view.features, &labels, cfg)?;
            BTreeMap::from([(MULTI_CLASS_TREE.to_string(), tree_document(&tree))])
        }
        TreeMode::OneVsRest => fit_one_vs_rest(&x, &view.features, &labels, cfg)?
            .iter()
            .map(|(label, tree)| (label.clone(), tree_document(tree)))
            .collect(),
    };
    Ok(RulesDocument { mode: cfg.mode, trees })
}

/// Dataset rows per class under `sel`, for the view summary.
pub fn class_counts(dataset: &Dataset, sel: &SelectionState) -> Result<BTreeMap<String, (ClassStatus, usize)>> {
    let values = dataset.column_values(&sel.target_column)?;
    let mut out: BTreeMap<String, (ClassStatus, usize)> = BTreeMap::new();
    for v in values {
        out.entry(v.clone()).or_insert((sel.status_of(v), 0)).1 += 1;
    }
    Ok(out)
}
