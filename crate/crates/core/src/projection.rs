//! Exact t-SNE for 2-D views of raw features or latent spaces, and a cache
//! that hands back an existing embedding when only the point coloring
//! changes.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Condvar, Mutex};

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ClassStatus, Dataset, SelectionState};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TsneSource {
    RawFeatures,
    Latent { model_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowFilter {
    AllIncluded,
    UnknownOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneRequest {
    pub dataset_id: String,
    pub source: TsneSource,
    /// See [`feature_fingerprint`].
    pub feature_fingerprint: String,
    pub row_filter: RowFilter,
    pub perplexity: f64,
    pub n_iter: usize,
    pub seed: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Order-sensitive digest of the selected feature names.
pub fn feature_fingerprint(features: &[String]) -> String {
    let mut h = Sha256::new();
    for f in features {
        h.update((f.len() as u64).to_le_bytes());
        h.update(f.as_bytes());
    }
    hex(&h.finalize())
}

/// Hex SHA-256 of raw bytes, used to pin a dataset file.
pub fn content_digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Digest of the projected dataset rows, in order.
pub fn row_fingerprint(rows: &[usize]) -> String {
    let mut h = Sha256::new();
    for &r in rows {
        h.update((r as u64).to_le_bytes());
    }
    hex(&h.finalize())
}

impl TsneRequest {
    /// Canonical cache key: every request field plus the projected row set.
    /// Coloring never enters the key.
    pub fn key(&self, rows: &[usize]) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            dataset_id: &'a str,
            source: &'a TsneSource,
            feature_fingerprint: &'a str,
            row_filter: RowFilter,
            rows: String,
            // bit pattern so that distinct floats never collide
            perplexity_bits: String,
            n_iter: usize,
            seed: u64,
        }
        serde_json::to_string(&Key {
            dataset_id: &self.dataset_id,
            source: &self.source,
            feature_fingerprint: &self.feature_fingerprint,
            row_filter: self.row_filter,
            rows: row_fingerprint(rows),
            perplexity_bits: format!("{:016x}", self.perplexity.to_bits()),
            n_iter: self.n_iter,
            seed: self.seed,
        })
        .expect("key serializes")
    }

    pub fn params(&self) -> TsneParams {
        TsneParams {
            perplexity: self.perplexity,
            n_iter: self.n_iter,
            seed: self.seed,
            ..TsneParams::default()
        }
    }
}

/// A request's perplexity must stay below `(rows - 1) / 3`.
pub fn check_request_perplexity(perplexity: f64, rows: usize) -> Result<()> {
    if rows < 4 || !(perplexity > 0.0) || perplexity >= (rows as f64 - 1.0) / 3.0 {
        return Err(Error::BadPerplexity { perplexity, rows });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub n_iter: usize,
    pub seed: u64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// `None` means `max(50, n / 12)`.
    pub learning_rate: Option<f64>,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iter: 1000,
            seed: 0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    /// Symmetric joint probabilities, zero diagonal, summing to 1.
    pub joint: Array2<f64>,
    /// Row-conditional probabilities `p(j | i)`.
    pub conditional: Array2<f64>,
    /// Precision `1 / (2 sigma_i^2)` found for each row.
    pub betas: Vec<f64>,
}

const ENTROPY_TOL: f64 = 1e-5;
const SEARCH_STEPS: usize = 64;

fn sq_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional row for precision `beta`, and its entropy in bits.
fn conditional_row(dist: &[f64], beta: f64, out: &mut [f64]) -> f64 {
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (o, &d) in out.iter_mut().zip(dist) {
        *o = (-beta * (d - min)).exp();
        sum += *o;
    }
    let mut entropy = 0.0;
    for o in out.iter_mut() {
        *o /= sum;
        if *o > 0.0 {
            entropy -= *o * o.log2();
        }
    }
    entropy
}

/// Gaussian affinities with per-row bandwidths matched to `perplexity` by
/// bisection on the precision.
pub fn conditional_affinities(x: &Array2<f64>, perplexity: f64) -> Result<Affinities> {
    let n = x.nrows();
    if n < 4 || !(perplexity >= 1.0) || perplexity > (n - 1) as f64 {
        return Err(Error::BadPerplexity { perplexity, rows: n });
    }
    let target = perplexity.log2();
    let d = sq_distances(x);
    let mut conditional = Array2::zeros((n, n));
    let mut betas = Vec::with_capacity(n);
    let mut dist = vec![0.0; n - 1];
    let mut row = vec![0.0; n - 1];
    for i in 0..n {
        for (slot, j) in (0..n).filter(|&j| j != i).enumerate() {
            dist[slot] = d[[i, j]];
        }
        let mean = dist.iter().sum::<f64>() / dist.len() as f64;
        let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for _ in 0..SEARCH_STEPS {
            let h = conditional_row(&dist, beta, &mut row);
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        conditional_row(&dist, beta, &mut row);
        for (slot, j) in (0..n).filter(|&j| j != i).enumerate() {
            conditional[[i, j]] = row[slot];
        }
        betas.push(beta);
    }
    let joint = (&conditional + &conditional.t()) / (2.0 * n as f64);
    Ok(Affinities {
        joint,
        conditional,
        betas,
    })
}

fn kl_divergence(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Output of [`tsne_embed`].
#[derive(Debug, Clone, PartialEq)]
pub struct TsneRun {
    pub coords: Array2<f64>,
    /// KL(P || Q) after every iteration, against the unexaggerated P.
    pub kl_history: Vec<f64>,
}

/// Gradient descent on KL(P || Q) with a Student-t Q, early exaggeration,
/// momentum and per-coordinate gains.
pub fn tsne_embed(x: &Array2<f64>, params: &TsneParams) -> Result<TsneRun> {
    let n = x.nrows();
    let aff = conditional_affinities(x, params.perplexity)?;
    let p = aff.joint.mapv(|v| v.max(1e-12));
    let lr = params.learning_rate.unwrap_or((n as f64 / 12.0).max(50.0));
    let mut rng = seeded_rng(params.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_fn((n, 2), |_| init.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    let mut kl_history = Vec::with_capacity(params.n_iter);

    for iter in 0..params.n_iter {
        let exaggeration = if iter < params.exaggeration_iters {
            params.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < params.exaggeration_iters {
            params.initial_momentum
        } else {
            params.final_momentum
        };
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = v;
                num[[j, i]] = v;
                total += 2.0 * v;
            }
        }
        let q = num.mapv(|v| (v / total).max(1e-12));
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mult = 4.0 * (exaggeration * p[[i, j]] - q[[i, j]]) * num[[i, j]];
                grad[[i, 0]] += mult * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += mult * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedError(format!("t-SNE gradient non-finite at iteration {iter}")));
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                (*gain * 0.8).max(0.01)
            };
            *u = momentum * *u - lr * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("n >= 4");
        y -= &mean;
        let mut q_off = q;
        q_off.diag_mut().fill(0.0);
        kl_history.push(kl_divergence(&aff.joint, &q_off));
    }
    Ok(TsneRun { coords: y, kl_history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneEmbedding {
    pub coords: Array2<f64>,
    /// Dataset row of each coordinate row.
    pub rows: Vec<usize>,
    pub request_key: String,
    pub kl_history: Vec<f64>,
}

/// Embeds `x` (whose rows are the dataset rows `rows`) for `req`.
pub fn tsne_fit(x: &Array2<f64>, rows: &[usize], req: &TsneRequest) -> Result<TsneEmbedding> {
    if x.nrows() != rows.len() {
        return Err(Error::ShapeError(format!("{} rows of data for {} row ids", x.nrows(), rows.len())));
    }
    check_request_perplexity(req.perplexity, x.nrows())?;
    let run = tsne_embed(x, &req.params())?;
    Ok(TsneEmbedding {
        coords: run.coords,
        rows: rows.to_vec(),
        request_key: req.key(rows),
        kl_history: run.kl_history,
    })
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

pub const DEFAULT_CACHE_CAPACITY: usize = 16;

struct CacheState {
    entries: HashMap<String, (Arc<TsneEmbedding>, u64)>,
    in_flight: HashMap<String, Arc<(Mutex<bool>, Condvar)>>,
    clock: u64,
}

/// Bounded LRU map from request key to embedding, with single-flight
/// computation per key.
pub struct TsneCache {
    capacity: usize,
    state: Mutex<CacheState>,
}

impl Default for TsneCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY)
    }
}

impl TsneCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Mutex::new(CacheState {
                entries: HashMap::new(),
                in_flight: HashMap::new(),
                clock: 0,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &str) -> bool {
        self.state.lock().expect("cache lock").entries.contains_key(key)
    }

    /// Returns the cached embedding for `key` or computes and stores it.
    /// The flag is true when no computation was needed by this caller.
    pub fn get_or_compute(
        &self,
        key: &str,
        compute: impl FnOnce() -> Result<TsneEmbedding>,
    ) -> Result<(Arc<TsneEmbedding>, bool)> {
        let mut compute = Some(compute);
        loop {
            let mut state = self.state.lock().expect("cache lock");
            state.clock += 1;
            let now = state.clock;
            if let Some((emb, used)) = state.entries.get_mut(key) {
                *used = now;
                return Ok((emb.clone(), true));
            }
            if let Some(flight) = state.in_flight.get(key).cloned() {
                drop(state);
                let (lock, cv) = &*flight;
                let mut done = lock.lock().expect("flight lock");
                while !*done {
                    done = cv.wait(done).expect("flight lock");
                }
                continue;
            }
            let flight = Arc::new((Mutex::new(false), Condvar::new()));
            state.in_flight.insert(key.to_string(), flight.clone());
            drop(state);

            let outcome = (compute.take().expect("computed at most once"))();

            let mut state = self.state.lock().expect("cache lock");
            state.in_flight.remove(key);
            let result = outcome.and_then(|emb| {
                if emb.request_key != key {
                    return Err(Error::StaleResult("embedding key does not match request".into()));
                }
                let emb = Arc::new(emb);
                state.clock += 1;
                let stamp = state.clock;
                state.entries.insert(key.to_string(), (emb.clone(), stamp));
                while state.entries.len() > self.capacity {
                    let oldest = state
                        .entries
                        .iter()
                        .min_by_key(|(_, (_, used))| *used)
                        .map(|(k, _)| k.clone())
                        .expect("non-empty");
                    state.entries.remove(&oldest);
                }
                Ok((emb, false))
            });
            drop(state);
            let (lock, cv) = &*flight;
            *lock.lock().expect("flight lock") = true;
            cv.notify_all();
            return result;
        }
    }
}

// ---------------------------------------------------------------------------
// Plot payload
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub label: String,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPayload {
    pub points: Vec<PlotPoint>,
    pub legend: Vec<LegendEntry>,
}

/// Cluster labels for unknown dataset rows.
#[derive(Debug, Clone, Copy)]
pub struct ClusterOverlay<'a> {
    pub rows: &'a [usize],
    pub labels: &'a [usize],
}

pub fn cluster_name(c: usize) -> String {
    format!("cluster_{c}")
}

/// Labels every embedded point by its class, or by its cluster when an
/// overlay covers it. Unknown rows missing from a supplied overlay make the
/// overlay stale.
pub fn color_points(
    embedding: &TsneEmbedding,
    dataset: &Dataset,
    sel: &SelectionState,
    overlay: Option<ClusterOverlay<'_>>,
) -> Result<PlotPayload> {
    let targets = dataset.column_values(&sel.target_column)?;
    let clusters: Option<HashMap<usize, usize>> = match overlay {
        Some(o) => {
            if o.rows.len() != o.labels.len() {
                return Err(Error::StaleResult("cluster overlay is misaligned".into()));
            }
            Some(o.rows.iter().copied().zip(o.labels.iter().copied()).collect())
        }
        None => None,
    };
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut points = Vec::with_capacity(embedding.rows.len());
    for (i, &row) in embedding.rows.iter().enumerate() {
        let class = targets
            .get(row)
            .ok_or_else(|| Error::StaleResult(format!("row {row} is not in the dataset")))?;
        let label = match &clusters {
            Some(map) => match map.get(&row) {
                Some(&c) => cluster_name(c),
                None if sel.status_of(class) == ClassStatus::Unknown => {
                    return Err(Error::StaleResult(format!("no cluster for unknown row {row}")))
                }
                None => class.clone(),
            },
            None => class.clone(),
        };
        *counts.entry(label.clone()).or_default() += 1;
        points.push(PlotPoint {
            x: embedding.coords[[i, 0]],
            y: embedding.coords[[i, 1]],
            label,
            row,
        });
    }
    Ok(PlotPayload {
        points,
        legend: counts
            .into_iter()
            .map(|(label, count)| LegendEntry { label, count })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn simplex_affinities_are_uniform() {
        let s = 0.5f64.sqrt();
        let x = array![[s, 0.0, 0.0, 0.0], [0.0, s, 0.0, 0.0], [0.0, 0.0, s, 0.0], [0.0, 0.0, 0.0, s]];
        let aff = conditional_affinities(&x, 2.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    assert_eq!(aff.joint[[i, j]], 0.0);
                } else {
                    assert!((aff.joint[[i, j]] - 1.0 / 12.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn infeasible_perplexity() {
        let x = Array2::from_shape_fn((10, 2), |(i, j)| (i + j) as f64);
        assert_eq!(conditional_affinities(&x, 20.0).unwrap_err().code(), "BadPerplexity");
        assert_eq!(conditional_affinities(&x, 0.5).unwrap_err().code(), "BadPerplexity");
        assert!(check_request_perplexity(3.0, 11).is_ok());
        assert!(check_request_perplexity(3.0, 10).is_err());
    }

    #[test]
    fn key_ignores_nothing_but_coloring() {
        let req = TsneRequest {
            dataset_id: "d".into(),
            source: TsneSource::RawFeatures,
            feature_fingerprint: feature_fingerprint(&["a".into(), "b".into()]),
            row_filter: RowFilter::AllIncluded,
            perplexity: 5.0,
            n_iter: 100,
            seed: 1,
        };
        let rows = [0, 1, 2];
        let base = req.key(&rows);
        assert_eq!(base, req.clone().key(&rows));
        let mut other = req.clone();
        other.perplexity = 5.000000001;
        assert_ne!(base, other.key(&rows));
        assert_ne!(base, req.key(&[0, 1, 3]));
        assert_ne!(
            feature_fingerprint(&["a".into(), "b".into()]),
            feature_fingerprint(&["b".into(), "a".into()])
        );
        assert_ne!(feature_fingerprint(&["ab".into()]), feature_fingerprint(&["a".into(), "b".into()]));
    }

    fn dummy(key: &str) -> TsneEmbedding {
        TsneEmbedding {
            coords: Array2::zeros((1, 2)),
            rows: vec![0],
            request_key: key.to_string(),
            kl_history: vec![],
        }
    }

    #[test]
    fn cache_evicts_least_recently_used() {
        let cache = TsneCache::new(2);
        cache.get_or_compute("a", || Ok(dummy("a"))).unwrap();
        cache.get_or_compute("b", || Ok(dummy("b"))).unwrap();
        let (_, hit) = cache.get_or_compute("a", || Ok(dummy("a"))).unwrap();
        assert!(hit);
        cache.get_or_compute("c", || Ok(dummy("c"))).unwrap();
        assert_eq!(cache.len(), 2);
        assert!(cache.contains("a") && cache.contains("c") && !cache.contains("b"));
    }

    #[test]
    fn cache_rejects_mismatched_key_and_errors() {
        let cache = TsneCache::new(2);
        assert!(cache.get_or_compute("a", || Ok(dummy("b"))).is_err());
        assert!(cache.get_or_compute("a", || Err(Error::Cancelled)).is_err());
        assert!(cache.is_empty());
        let (_, hit) = cache.get_or_compute("a", || Ok(dummy("a"))).unwrap();
        assert!(!hit);
    }
}
