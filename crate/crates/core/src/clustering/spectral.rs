use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_fit, sq_dist, ClusterAssignment, KmeansConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Affinity {
    /// Gaussian kernel `exp(-gamma * |xi - xj|^2)`. Without a gamma the
    /// median pairwise distance sets the scale.
    Rbf {
        #[serde(default)]
        gamma: Option<f64>,
    },
    /// Binary k-nearest-neighbour graph, symmetrized by union unless
    /// `mutual` is set (then by intersection).
    KnnGraph {
        n_neighbors: usize,
        #[serde(default)]
        mutual: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    pub k: usize,
    pub affinity: Affinity,
    #[serde(default)]
    pub seed: u64,
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::BadConfig("k must be at least 1".into()));
        }
        match self.affinity {
            Affinity::Rbf { gamma: Some(g) } if !(g > 0.0 && g.is_finite()) => {
                Err(Error::BadConfig("gamma must be positive".into()))
            }
            Affinity::KnnGraph { n_neighbors: 0, .. } => {
                Err(Error::BadConfig("n_neighbors must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

fn pairwise_sq(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(x.row(i), x.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// `1 / (2 * median^2)` over all distinct-pair distances.
pub fn median_gamma(x: &Array2<f64>) -> f64 {
    let d = pairwise_sq(x);
    let n = x.nrows();
    let mut vals: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d[[i, j]])
        .collect();
    if vals.is_empty() {
        return 1.0;
    }
    vals.sort_by(f64::total_cmp);
    let m = vals.len();
    let median_sq = if m % 2 == 1 {
        vals[m / 2]
    } else {
        // median of distances, squared
        let a = vals[m / 2 - 1].sqrt();
        let b = vals[m / 2].sqrt();
        ((a + b) / 2.0).powi(2)
    };
    if median_sq > 0.0 {
        1.0 / (2.0 * median_sq)
    } else {
        1.0
    }
}

pub fn affinity_matrix(x: &Array2<f64>, affinity: Affinity) -> Array2<f64> {
    let n = x.nrows();
    let d = pairwise_sq(x);
    match affinity {
        Affinity::Rbf { gamma } => {
            let gamma = gamma.unwrap_or_else(|| median_gamma(x));
            let mut w = d.mapv(|v| (-gamma * v).exp());
            w.diag_mut().fill(0.0);
            w
        }
        Affinity::KnnGraph { n_neighbors, mutual } => {
            let mut chosen = Array2::<bool>::from_elem((n, n), false);
            for i in 0..n {
                let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                order.sort_by(|&a, &b| d[[i, a]].total_cmp(&d[[i, b]]).then(a.cmp(&b)));
                for &j in order.iter().take(n_neighbors) {
                    chosen[[i, j]] = true;
                }
            }
            Array2::from_shape_fn((n, n), |(i, j)| {
                let edge = if mutual {
                    chosen[[i, j]] && chosen[[j, i]]
                } else {
                    chosen[[i, j]] || chosen[[j, i]]
                };
                if edge {
                    1.0
                } else {
                    0.0
                }
            })
        }
    }
}

/// `I - D^{-1/2} W D^{-1/2}`; isolated vertices get a unit diagonal.
pub fn normalized_laplacian(w: &Array2<f64>) -> Array2<f64> {
    let n = w.nrows();
    let inv_sqrt: Vec<f64> = w
        .rows()
        .into_iter()
        .map(|r| {
            let deg: f64 = r.sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * w[[i, j]] * inv_sqrt[j]
    })
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching unit
/// eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m: Vec<f64> = a.iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = (f64::EPSILON * norm.max(f64::MIN_POSITIVE)).powi(2);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[a * n + a].total_cmp(&m[b * n + b]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[r * n + order[c]]);
    (values, vectors)
}

/// Rows of the `k` smallest Laplacian eigenvectors, scaled to unit length.
pub fn spectral_embedding(x: &Array2<f64>, affinity: Affinity, k: usize) -> Array2<f64> {
    let w = affinity_matrix(x, affinity);
    let lap = normalized_laplacian(&w);
    let (_, vectors) = symmetric_eigen(&lap);
    let mut u = vectors.slice(ndarray::s![.., ..k]).to_owned();
    for mut row in u.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    u
}

pub fn spectral_fit(x: &Array2<f64>, cfg: &SpectralConfig) -> Result<ClusterAssignment> {
    cfg.validate()?;
    if x.nrows() < cfg.k {
        return Err(Error::TooFewRows {
            rows: x.nrows(),
            k: cfg.k,
        });
    }
    let u = spectral_embedding(x, cfg.affinity, cfg.k);
    let fit = kmeans_fit(&u, &KmeansConfig::new(cfg.k, cfg.seed))?;
    Ok(ClusterAssignment {
        labels: fit.labels,
        inertia: None,
        iterations_run: fit.iterations_run,
    })
}
