//! Novel class discovery models.
//!
//! * [`run_baseline`]: a classifier trained on the known classes, whose last
//!   hidden layer is used as the space where unknown rows are clustered with
//!   k-means.
//! * [`run_tabular_ncd`]: an encoder pretrained with masked swap-noise
//!   self-supervision, then trained jointly with a known-class head and a
//!   novel-cluster head that learns from pairwise pseudo-labels.

mod baseline;
mod tabular;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{LayerSpec, Activation, Mlp};

pub use baseline::{run_baseline, BaselineNcdConfig};
pub use tabular::{
    attach_ssl_heads, detach_ssl_heads, pair_loss, pseudo_labels, run_tabular_ncd, ssl_epoch, ssl_loss,
    ssl_pretrain, vime_corrupt, vime_corrupt_from, JointConfig, PairLabel, SslConfig, TabularNcdConfig,
    MASK_HEAD, RECON_HEAD,
};

pub const CLASSIFIER_HEAD: &str = "classifier";
pub const CLUSTER_HEAD: &str = "clusters";

/// Default trunk used when a config does not list hidden layers.
pub fn default_hidden() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(64, Activation::ReLU, 0.0),
        LayerSpec::new(32, Activation::ReLU, 0.0),
    ]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean self-supervised loss per pretraining epoch.
    pub pretrain: Vec<f64>,
    /// Mean loss per supervised / joint epoch.
    pub train: Vec<f64>,
}

/// Output of an NCD run.
#[derive(Debug, Clone)]
pub struct NcdResult {
    pub k: usize,
    /// Cluster index per unknown row, each `< k`.
    pub unknown_labels: Vec<usize>,
    /// Predicted known class per known row.
    pub known_predictions: Vec<usize>,
    pub latent_known: Array2<f64>,
    pub latent_unknown: Array2<f64>,
    pub model: Mlp,
    pub history: TrainingHistory,
}

pub(crate) fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
