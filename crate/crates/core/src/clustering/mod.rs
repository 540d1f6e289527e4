//! k-means, spectral clustering and clustering evaluation metrics.

mod kmeans;
mod metrics;
mod spectral;

pub use kmeans::{
    kmeans_fit, kmeans_plus_plus, kmeans_runs, lloyd_run, ClusterAssignment, KmeansConfig, LloydRun,
};
pub use metrics::{ari, clustering_accuracy, hungarian_match, linear_assignment, nmi, Matching};
pub use spectral::{
    affinity_matrix, median_gamma, normalized_laplacian, spectral_embedding, spectral_fit,
    symmetric_eigen, Affinity, SpectralConfig,
};
