use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansConfig {
    pub k: usize,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_init() -> usize {
    10
}
fn default_max_iter() -> usize {
    300
}
fn default_tol() -> f64 {
    1e-4
}

impl KmeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            n_init: default_n_init(),
            max_iter: default_max_iter(),
            tol: default_tol(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_init == 0 || self.max_iter == 0 {
            return Err(Error::BadConfig("k, n_init and max_iter must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::BadConfig("tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroid; k-means only.
    pub inertia: Option<f64>,
    pub iterations_run: usize,
}

/// Outcome of a single Lloyd run.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every iteration, then after the final assignment.
    pub inertia_trace: Vec<f64>,
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid, lowest index on ties.
fn nearest(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
pub fn kmeans_plus_plus(x: &Array2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Floating round-off can walk past the end; fall back to the last
            // point with positive weight.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(pick)));
        }
    }
    centroids
}

fn assign(x: &Array2<f64>, centroids: &Array2<f64>, labels: &mut [usize]) -> Vec<f64> {
    x.rows()
        .into_iter()
        .zip(labels.iter_mut())
        .map(|(r, l)| {
            let (c, d) = nearest(r, centroids);
            *l = c;
            d
        })
        .collect()
}

/// Gives every empty cluster the point farthest from its centroid, taken
/// from a cluster that can spare it.
fn repair_empty(labels: &mut [usize], dists: &mut [f64], k: usize) {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let donor = (0..labels.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .fold(None::<usize>, |best, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            });
        if let Some(i) = donor {
            sizes[labels[i]] -= 1;
            labels[i] = empty;
            sizes[empty] += 1;
            dists[i] = 0.0;
        }
    }
}

fn means(x: &Array2<f64>, labels: &[usize], previous: &Array2<f64>) -> Array2<f64> {
    let k = previous.nrows();
    let mut sums = Array2::<f64>::zeros(previous.raw_dim());
    let mut counts = vec![0usize; k];
    for (r, &l) in x.rows().into_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &r;
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums.row_mut(c).assign(&previous.row(c));
        } else {
            let mut s = sums.row_mut(c);
            s /= counts[c] as f64;
        }
    }
    sums
}

fn inertia_of(x: &Array2<f64>, labels: &[usize], centroids: &Array2<f64>) -> f64 {
    x.rows()
        .into_iter()
        .zip(labels)
        .map(|(r, &l)| sq_dist(r, centroids.row(l)))
        .sum()
}

/// One Lloyd run from the given initial centroids.
pub fn lloyd_run(x: &Array2<f64>, init: Array2<f64>, max_iter: usize, tol: f64) -> LloydRun {
    let k = init.nrows();
    let mut centroids = init;
    let mut labels = vec![0usize; x.nrows()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut dists = assign(x, &centroids, &mut labels);
        repair_empty(&mut labels, &mut dists, k);
        let updated = means(x, &labels, &centroids);
        trace.push(inertia_of(x, &labels, &updated));
        let shift = centroids
            .rows()
            .into_iter()
            .zip(updated.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < tol || shift == 0.0 {
            break;
        }
    }
    let dists = assign(x, &centroids, &mut labels);
    let inertia = dists.iter().sum();
    trace.push(inertia);
    LloydRun {
        labels,
        centroids,
        inertia,
        iterations,
        inertia_trace: trace,
    }
}

/// Random stream for the `run`-th initialization.
pub(crate) fn run_rng(seed: u64, run: usize) -> Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(run as u64);
    rng
}

/// Best of `n_init` k-means++ seeded Lloyd runs.
pub fn kmeans_runs(x: &Array2<f64>, cfg: &KmeansConfig) -> Result<Vec<LloydRun>> {
    cfg.validate()?;
    if x.nrows() < cfg.k {
        return Err(Error::TooFewRows {
            rows: x.nrows(),
            k: cfg.k,
        });
    }
    Ok((0..cfg.n_init)
        .map(|run| {
            let mut rng = run_rng(cfg.seed, run);
            let init = kmeans_plus_plus(x, cfg.k, &mut rng);
            lloyd_run(x, init, cfg.max_iter, cfg.tol)
        })
        .collect())
}

pub fn kmeans_fit(x: &Array2<f64>, cfg: &KmeansConfig) -> Result<ClusterAssignment> {
    let runs = kmeans_runs(x, cfg)?;
    // strict `<` keeps the earliest run among equal inertias
    let best = runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("n_init >= 1");
    Ok(ClusterAssignment {
        labels: best.labels,
        inertia: Some(best.inertia),
        iterations_run: best.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_cluster_inertia_is_total_scatter() {
        let x = array![[0.0, 1.0], [2.0, 3.0], [4.0, -1.0], [1.0, 1.0]];
        let fit = kmeans_fit(&x, &KmeansConfig::new(1, 0)).unwrap();
        assert!(fit.labels.iter().all(|&l| l == 0));
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        let expected: f64 = x.rows().into_iter().map(|r| sq_dist(r, mean.view())).sum();
        assert!((fit.inertia.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn four_points_split_by_gap() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        // brute force over all 2-partitions
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << 4) - 1 {
            let labels: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
            let c = means(&x, &labels, &Array2::zeros((2, 2)));
            let inertia = inertia_of(&x, &labels, &c);
            if inertia < best.0 {
                best = (inertia, mask);
            }
        }
        let fit = kmeans_fit(&x, &KmeansConfig::new(2, 3)).unwrap();
        assert!((fit.inertia.unwrap() - best.0).abs() < 1e-12);
        assert_eq!(fit.labels[0], fit.labels[1]);
        assert_eq!(fit.labels[2], fit.labels[3]);
        assert_ne!(fit.labels[0], fit.labels[2]);
    }

    #[test]
    fn duplicates_share_labels() {
        let x = array![[1.0, 1.0], [1.0, 1.0], [5.0, 5.0], [5.0, 5.0], [9.0, 0.0], [9.0, 0.0]];
        let fit = kmeans_fit(&x, &KmeansConfig::new(3, 1)).unwrap();
        for pair in fit.labels.chunks(2) {
            assert_eq!(pair[0], pair[1]);
        }
    }

    #[test]
    fn k_equal_rows_isolates_points() {
        let x = array![[0.0], [3.0], [7.0], [20.0]];
        let fit = kmeans_fit(&x, &KmeansConfig::new(4, 0)).unwrap();
        let mut l = fit.labels.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 4);
        assert_eq!(fit.inertia, Some(0.0));
    }

    #[test]
    fn too_few_rows() {
        let x = array![[0.0], [1.0]];
        let err = kmeans_fit(&x, &KmeansConfig::new(3, 0)).unwrap_err();
        assert_eq!(err.code(), "TooFewRows");
    }

    #[test]
    fn empty_cluster_repair_keeps_k() {
        // identical initial centroids force an empty cluster on the first step
        let x = array![[0.0], [1.0], [10.0], [11.0]];
        let init = array![[0.5], [0.5]];
        let run = lloyd_run(&x, init, 50, 0.0);
        assert!(run.labels.contains(&1) && run.labels.contains(&0));
        assert!((run.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_for_seed() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 13) % 11) as f64);
        let a = kmeans_fit(&x, &KmeansConfig::new(4, 42)).unwrap();
        let b = kmeans_fit(&x, &KmeansConfig::new(4, 42)).unwrap();
        assert_eq!(a, b);
    }
}
