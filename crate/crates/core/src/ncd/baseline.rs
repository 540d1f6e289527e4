use serde::{Deserialize, Serialize};

use super::{argmax_rows, default_hidden, NcdResult, TrainingHistory, CLASSIFIER_HEAD};
use crate::clustering::{kmeans_fit, KmeansConfig};
use crate::dataset::DataView;
use crate::error::{Error, Result};
use crate::nn::{
    init_mlp, seeded_rng, select_rows, shuffled_batches, train_epoch, Activation, ArchitectureSpec, Batch,
    HeadSpec, LayerSpec, Loss, Mode, Optimizer, Target, TrainConfig,
};
use crate::progress::{ProgressSink, ProgressTracker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineNcdConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<LayerSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    pub k: usize,
}

impl BaselineNcdConfig {
    pub fn new(k: usize) -> Self {
        Self {
            hidden: default_hidden(),
            train: TrainConfig::default(),
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::BadConfig("k must be at least 1".into()));
        }
        self.train.validate()
    }
}

/// Trains a known-class classifier, embeds unknown rows at its last hidden
/// layer and clusters them with k-means.
pub fn run_baseline(view: &DataView, cfg: &BaselineNcdConfig, progress: &dyn ProgressSink) -> Result<NcdResult> {
    cfg.validate()?;
    if view.n_known() < 2 {
        return Err(Error::InvalidPartition("need at least 2 known rows".into()));
    }
    if view.n_unknown() < cfg.k {
        return Err(Error::TooFewRows {
            rows: view.n_unknown(),
            k: cfg.k,
        });
    }
    let n_classes = view.known_classes.len();
    let arch = ArchitectureSpec {
        input_dim: view.features.len(),
        hidden: cfg.hidden.clone(),
    };
    let seed = cfg.train.seed;
    let mut mlp = init_mlp(&arch, &[HeadSpec::new(CLASSIFIER_HEAD, n_classes, Activation::None)], seed)?;
    let mut rng = seeded_rng(seed);
    rng.set_stream(1);
    let mut optimizer = Optimizer::from_config(&cfg.train);
    let loss = Loss::cross_entropy(CLASSIFIER_HEAD);

    let mut tracker = ProgressTracker::new(progress, cfg.train.epochs + 1);
    tracker.start()?;
    let mut history = TrainingHistory::default();
    for _ in 0..cfg.train.epochs {
        let batches: Vec<Batch> = shuffled_batches(view.n_known(), cfg.train.batch_size, &mut rng)
            .into_iter()
            .map(|rows| Batch {
                x: select_rows(&view.x_known, &rows),
                targets: vec![Target::Classes(rows.iter().map(|&r| view.y_known[r]).collect())],
            })
            .collect();
        history
            .train
            .push(train_epoch(&mut mlp, &mut optimizer, batches, &loss, &mut rng)?);
        tracker.step()?;
    }

    let latent_known = mlp.embed(&view.x_known)?;
    let latent_unknown = mlp.embed(&view.x_unknown)?;
    let (logits, _) = mlp.forward(&view.x_known, CLASSIFIER_HEAD, Mode::Eval)?;
    let clusters = kmeans_fit(&latent_unknown, &KmeansConfig::new(cfg.k, seed))?;
    tracker.step()?;

    Ok(NcdResult {
        k: cfg.k,
        unknown_labels: clusters.labels,
        known_predictions: argmax_rows(&logits),
        latent_known,
        latent_unknown,
        model: mlp,
        history,
    })
}
