use ndarray::{s, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{argmax_rows, default_hidden, NcdResult, TrainingHistory, CLASSIFIER_HEAD, CLUSTER_HEAD};
use crate::dataset::DataView;
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, init_mlp, mse, seeded_rng, select_rows, shuffled_batches, softmax, train_epoch, Activation,
    ArchitectureSpec, Batch, HeadSpec, LayerSpec, Loss, LossKind, Mlp, Mode, Optimizer, Rng, Target,
    TrainConfig,
};
use crate::progress::{ProgressSink, ProgressTracker};

pub const MASK_HEAD: &str = "ssl_mask";
pub const RECON_HEAD: &str = "ssl_reconstruction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    /// Probability that a cell is swapped, in (0, 1).
    #[serde(default = "default_corruption")]
    pub corruption_rate: f64,
    #[serde(default = "default_ssl_epochs")]
    pub epochs: usize,
    /// Weight of the reconstruction term next to mask estimation.
    #[serde(default = "one")]
    pub recon_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    /// Share of in-batch unknown pairs labelled as similar.
    #[serde(default = "default_top_k")]
    pub top_k_fraction: f64,
    #[serde(default = "one")]
    pub consistency_weight: f64,
    #[serde(default = "one")]
    pub pseudo_weight: f64,
}

fn default_corruption() -> f64 {
    0.3
}
fn default_ssl_epochs() -> usize {
    10
}
fn default_top_k() -> f64 {
    0.1
}
fn one() -> f64 {
    1.0
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            corruption_rate: default_corruption(),
            epochs: default_ssl_epochs(),
            recon_weight: 1.0,
        }
    }
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            top_k_fraction: default_top_k(),
            consistency_weight: 1.0,
            pseudo_weight: 1.0,
        }
    }
}

/// TabularNCD settings. `train.epochs` counts joint-phase epochs;
/// pretraining runs for `ssl.epochs` with the same optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularNcdConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<LayerSpec>,
    #[serde(default)]
    pub ssl: SslConfig,
    #[serde(default)]
    pub joint: JointConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub k: usize,
}

impl TabularNcdConfig {
    pub fn new(k: usize) -> Self {
        Self {
            hidden: default_hidden(),
            ssl: SslConfig::default(),
            joint: JointConfig::default(),
            train: TrainConfig::default(),
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::BadConfig("k must be at least 1".into()));
        }
        let p = self.ssl.corruption_rate;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::BadConfig("corruption_rate must be in (0, 1)".into()));
        }
        let f = self.joint.top_k_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::BadConfig("top_k_fraction must be in (0, 1)".into()));
        }
        for (name, w) in [
            ("recon_weight", self.ssl.recon_weight),
            ("consistency_weight", self.joint.consistency_weight),
            ("pseudo_weight", self.joint.pseudo_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::BadConfig(format!("{name} must be non-negative")));
            }
        }
        self.train.validate()
    }
}

/// Swap noise: each cell is replaced, with probability `p_m`, by the same
/// column's value from a uniformly drawn row of `pool`.
pub fn vime_corrupt_from(x: &Array2<f64>, pool: &Array2<f64>, p_m: f64, rng: &mut Rng) -> (Array2<f64>, Array2<f64>) {
    assert_eq!(x.ncols(), pool.ncols(), "pool must have the same columns");
    let mut corrupted = x.clone();
    let mut mask = Array2::zeros(x.raw_dim());
    let rows = pool.nrows();
    for ((i, j), m) in mask.indexed_iter_mut() {
        if rng.random::<f64>() < p_m {
            *m = 1.0;
            corrupted[[i, j]] = pool[[rng.random_range(0..rows), j]];
        }
    }
    (corrupted, mask)
}

pub fn vime_corrupt(x: &Array2<f64>, p_m: f64, rng: &mut Rng) -> (Array2<f64>, Array2<f64>) {
    vime_corrupt_from(x, x, p_m, rng)
}

/// Adds the temporary mask-estimation and reconstruction heads.
pub fn attach_ssl_heads(mlp: &mut Mlp, rng: &mut Rng) -> Result<()> {
    let d = mlp.spec.input_dim;
    mlp.attach_head(HeadSpec::new(MASK_HEAD, d, Activation::Sigmoid), rng)?;
    mlp.attach_head(HeadSpec::new(RECON_HEAD, d, Activation::None), rng)
}

pub fn detach_ssl_heads(mlp: &mut Mlp) {
    mlp.remove_head(MASK_HEAD);
    mlp.remove_head(RECON_HEAD);
}

fn ssl_objective(recon_weight: f64) -> Loss {
    Loss::composite(vec![
        (MASK_HEAD, LossKind::Bce, 1.0),
        (RECON_HEAD, LossKind::Mse, recon_weight),
    ])
}

/// `BCE(mask estimate, mask) + recon_weight * MSE(reconstruction, original)`
/// evaluated without dropout. Requires the SSL heads.
pub fn ssl_loss(mlp: &Mlp, corrupted: &Array2<f64>, mask: &Array2<f64>, original: &Array2<f64>, recon_weight: f64) -> Result<f64> {
    let targets = [Target::Dense(mask.clone()), Target::Dense(original.clone())];
    Ok(mlp
        .loss_and_gradients(corrupted, &ssl_objective(recon_weight), &targets, Mode::Eval)?
        .0)
}

/// One self-supervised epoch over `x_all`. Requires the SSL heads.
pub fn ssl_epoch(
    mlp: &mut Mlp,
    optimizer: &mut Optimizer,
    x_all: &Array2<f64>,
    cfg: &SslConfig,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut batches = Vec::new();
    for rows in shuffled_batches(x_all.nrows(), batch_size, rng) {
        let original = select_rows(x_all, &rows);
        let (corrupted, mask) = vime_corrupt_from(&original, x_all, cfg.corruption_rate, rng);
        batches.push(Batch {
            x: corrupted,
            targets: vec![Target::Dense(mask), Target::Dense(original)],
        });
    }
    train_epoch(mlp, optimizer, batches, &ssl_objective(cfg.recon_weight), rng)
}

/// Pretrains the trunk of `encoder` on all included rows; the temporary
/// heads are discarded afterwards. Returns per-epoch losses.
pub fn ssl_pretrain(
    encoder: &mut Mlp,
    x_all: &Array2<f64>,
    cfg: &SslConfig,
    train: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut() -> Result<()>,
) -> Result<Vec<f64>> {
    attach_ssl_heads(encoder, rng)?;
    let mut optimizer = Optimizer::from_config(train);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let outcome = (|| {
        for _ in 0..cfg.epochs {
            losses.push(ssl_epoch(encoder, &mut optimizer, x_all, cfg, train.batch_size, rng)?);
            on_epoch()?;
        }
        Ok(())
    })();
    detach_ssl_heads(encoder);
    outcome.map(|_| losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLabel {
    pub i: usize,
    pub j: usize,
    /// 1 when the pair is among the most similar in the batch.
    pub similar: bool,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Labels the `ceil(fraction * pairs)` most cosine-similar pairs of rows of
/// `z` as similar. Pairs are enumerated `(0,1), (0,2), .., (1,2), ..`; ties
/// go to the earlier pair.
pub fn pseudo_labels(z: &Array2<f64>, top_k_fraction: f64) -> Vec<PairLabel> {
    let n = z.nrows();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j, cosine(z.row(i), z.row(j))));
        }
    }
    let positives = (top_k_fraction * pairs.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[b].2.total_cmp(&pairs[a].2).then(a.cmp(&b)));
    let mut similar = vec![false; pairs.len()];
    for &p in order.iter().take(positives) {
        similar[p] = true;
    }
    pairs
        .into_iter()
        .zip(similar)
        .map(|((i, j, _), similar)| PairLabel { i, j, similar })
        .collect()
}

const PAIR_EPS: f64 = 1e-7;

/// Mean binary cross-entropy between pair labels and the pair score
/// `<p_i, p_j>` of cluster probabilities. Returns the loss and its gradient
/// w.r.t. `probs`.
pub fn pair_loss(probs: &Array2<f64>, labels: &[PairLabel]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(probs.raw_dim());
    if labels.is_empty() {
        return (0.0, grad);
    }
    let m = labels.len() as f64;
    let mut loss = 0.0;
    for l in labels {
        let (pi, pj) = (probs.row(l.i), probs.row(l.j));
        let score = pi.dot(&pj).clamp(PAIR_EPS, 1.0 - PAIR_EPS);
        let y = if l.similar { 1.0 } else { 0.0 };
        loss -= y * score.ln() + (1.0 - y) * (1.0 - score).ln();
        let g = (score - y) / (score * (1.0 - score)) / m;
        let (pi, pj) = (pi.to_owned(), pj.to_owned());
        grad.row_mut(l.i).scaled_add(g, &pj);
        grad.row_mut(l.j).scaled_add(g, &pi);
    }
    (loss / m, grad)
}

/// Gradient through a row-wise softmax.
fn softmax_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = d_probs.clone();
    for (mut o, p) in out.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0))) {
        let inner = o.dot(&p);
        o.zip_mut_with(&p, |g, &pv| *g = pv * (*g - inner));
    }
    out
}

fn add_rows(target: &mut Array2<f64>, offset: usize, block: &Array2<f64>) {
    let mut view = target.slice_mut(s![offset..offset + block.nrows(), ..]);
    view += block;
}

/// Loss and parameter gradients for one joint-phase batch whose first
/// `labels.len()` rows are known.
fn joint_step(
    mlp: &Mlp,
    x: &Array2<f64>,
    labels: &[usize],
    pool: &Array2<f64>,
    cfg: &TabularNcdConfig,
    rng: &mut Rng,
) -> Result<(f64, crate::nn::Gradients)> {
    let n = x.nrows();
    let nk = labels.len();
    let heads = [CLASSIFIER_HEAD, CLUSTER_HEAD];
    let clean = mlp.forward_pass(x, &heads, Mode::Train(rng))?;
    let mut d_cls = Array2::zeros(clean.logits(CLASSIFIER_HEAD)?.raw_dim());
    let mut d_clu = Array2::zeros(clean.logits(CLUSTER_HEAD)?.raw_dim());
    let mut total = 0.0;

    if nk > 0 {
        let logits = clean.logits(CLASSIFIER_HEAD)?.slice(s![..nk, ..]).to_owned();
        let (ce, g) = cross_entropy(&logits, labels)?;
        total += ce;
        add_rows(&mut d_cls, 0, &g);
    }

    let w_pair = cfg.joint.pseudo_weight;
    if n - nk >= 2 && w_pair > 0.0 {
        let z = clean.embedding.slice(s![nk.., ..]).to_owned();
        let pairs = pseudo_labels(&z, cfg.joint.top_k_fraction);
        let probs = softmax(&clean.logits(CLUSTER_HEAD)?.slice(s![nk.., ..]).to_owned());
        let (pl, dp) = pair_loss(&probs, &pairs);
        total += w_pair * pl;
        add_rows(&mut d_clu, nk, &(softmax_backward(&probs, &dp) * w_pair));
    }

    let w_cons = cfg.joint.consistency_weight;
    let mut corr_grads = None;
    if w_cons > 0.0 {
        let (xc, _) = vime_corrupt_from(x, pool, cfg.ssl.corruption_rate, rng);
        let corr = mlp.forward_pass(&xc, &heads, Mode::Train(rng))?;
        let mut corr_logit_grads = Vec::with_capacity(2);
        for (head, d_clean) in [(CLASSIFIER_HEAD, &mut d_cls), (CLUSTER_HEAD, &mut d_clu)] {
            let p = softmax(clean.logits(head)?);
            let q = softmax(corr.logits(head)?);
            let (c, dp) = mse(&p, &q)?;
            total += w_cons * c;
            let dp = dp * w_cons;
            *d_clean += &softmax_backward(&p, &dp);
            corr_logit_grads.push((head, softmax_backward(&q, &(-dp))));
        }
        corr_grads = Some(mlp.backward(&corr, &corr_logit_grads, None)?);
    }

    let mut grads = mlp.backward(&clean, &[(CLASSIFIER_HEAD, d_cls), (CLUSTER_HEAD, d_clu)], None)?;
    if let Some(g) = corr_grads {
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Slices `rows` into `n_batches` nearly equal contiguous parts.
fn split_even(rows: &[usize], n_batches: usize, b: usize) -> &[usize] {
    let lo = b * rows.len() / n_batches;
    let hi = (b + 1) * rows.len() / n_batches;
    &rows[lo..hi]
}

/// Self-supervised pretraining followed by joint training of a known-class
/// head and a novel-cluster head.
pub fn run_tabular_ncd(view: &DataView, cfg: &TabularNcdConfig, progress: &dyn ProgressSink) -> Result<NcdResult> {
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
    let arch = ArchitectureSpec {
        input_dim: view.features.len(),
        hidden: cfg.hidden.clone(),
    };
    let seed = cfg.train.seed;
    let mut mlp = init_mlp(&arch, &[], seed)?;
    let mut rng = seeded_rng(seed);
    rng.set_stream(1);
    let x_all = view.x_all();

    let mut tracker = ProgressTracker::new(progress, cfg.ssl.epochs + cfg.train.epochs);
    tracker.start()?;
    let mut history = TrainingHistory {
        pretrain: ssl_pretrain(&mut mlp, &x_all, &cfg.ssl, &cfg.train, &mut rng, || tracker.step())?,
        train: Vec::with_capacity(cfg.train.epochs),
    };

    mlp.attach_head(
        HeadSpec::new(CLASSIFIER_HEAD, view.known_classes.len(), Activation::None),
        &mut rng,
    )?;
    mlp.attach_head(HeadSpec::new(CLUSTER_HEAD, cfg.k, Activation::None), &mut rng)?;
    let mut optimizer = Optimizer::from_config(&cfg.train);

    let (nk, nu) = (view.n_known(), view.n_unknown());
    let n_batches = (nk + nu).div_ceil(cfg.train.batch_size);
    for _ in 0..cfg.train.epochs {
        let mut known: Vec<usize> = (0..nk).collect();
        let mut unknown: Vec<usize> = (0..nu).collect();
        rand::seq::SliceRandom::shuffle(known.as_mut_slice(), &mut rng);
        rand::seq::SliceRandom::shuffle(unknown.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for b in 0..n_batches {
            let kb = split_even(&known, n_batches, b);
            let ub = split_even(&unknown, n_batches, b);
            let x = ndarray::concatenate![
                Axis(0),
                select_rows(&view.x_known, kb),
                select_rows(&view.x_unknown, ub)
            ];
            let labels: Vec<usize> = kb.iter().map(|&r| view.y_known[r]).collect();
            let (loss, grads) = joint_step(&mlp, &x, &labels, &x_all, cfg, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::DivergedError(format!("joint loss became {loss}")));
            }
            optimizer.step(&mut mlp, &grads)?;
            epoch_loss += loss;
        }
        history.train.push(epoch_loss / n_batches as f64);
        tracker.step()?;
    }

    let pass_known = mlp.forward_pass(&view.x_known, &[CLASSIFIER_HEAD], Mode::Eval)?;
    let pass_unknown = mlp.forward_pass(&view.x_unknown, &[CLUSTER_HEAD], Mode::Eval)?;
    Ok(NcdResult {
        k: cfg.k,
        unknown_labels: argmax_rows(pass_unknown.logits(CLUSTER_HEAD)?),
        known_predictions: argmax_rows(pass_known.logits(CLASSIFIER_HEAD)?),
        latent_known: pass_known.embedding,
        latent_unknown: pass_unknown.embedding,
        model: mlp,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn corruption_leaves_unmasked_cells() {
        let x = Array2::from_shape_fn((50, 4), |(i, j)| (i * 4 + j) as f64);
        let mut rng = seeded_rng(1);
        let (xc, mask) = vime_corrupt(&x, 1e-12, &mut rng);
        for ((idx, &m), &v) in mask.indexed_iter().zip(xc.iter()) {
            if m == 0.0 {
                assert_eq!(v, x[idx]);
            }
        }
        let (xc, mask) = vime_corrupt(&x, 0.5, &mut rng);
        for ((idx, &m), &v) in mask.indexed_iter().zip(xc.iter()) {
            if m == 0.0 {
                assert_eq!(v, x[idx]);
            }
        }
    }

    #[test]
    fn constant_column_survives_swap_noise() {
        let x = Array2::from_shape_fn((30, 2), |(i, j)| if j == 0 { 7.5 } else { i as f64 });
        let (xc, _) = vime_corrupt(&x, 0.9, &mut seeded_rng(2));
        assert!(xc.column(0).iter().all(|&v| v == 7.5));
    }

    #[test]
    fn mask_density_matches_rate() {
        let x = Array2::zeros((1000, 100));
        let (_, mask) = vime_corrupt(&x, 0.3, &mut seeded_rng(3));
        let density = mask.sum() / mask.len() as f64;
        assert!((density - 0.3).abs() < 0.01, "{density}");
    }

    #[test]
    fn pseudo_labels_pick_most_similar_pairs() {
        let z = array![[1.0, 2.0], [1.0, 2.0]];
        assert!(pseudo_labels(&z, 0.5)[0].similar);
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let p = pseudo_labels(&z, 0.5);
        assert_eq!(p.len(), 1);
        assert!(p[0].similar);

        let z = array![[1.0, 0.05], [1.0, 0.0], [0.0, 1.0], [0.02, 1.0]];
        // enumerate and rank the 6 pairs by cosine
        let mut ranked: Vec<((usize, usize), f64)> = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                ranked.push(((i, j), cosine(z.row(i), z.row(j))));
            }
        }
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let expected: Vec<(usize, usize)> = ranked.iter().take(2).map(|r| r.0).collect();
        let labels = pseudo_labels(&z, 1.0 / 3.0);
        let positives: Vec<(usize, usize)> = labels.iter().filter(|l| l.similar).map(|l| (l.i, l.j)).collect();
        assert_eq!(positives.len(), 2);
        for p in &expected {
            assert!(positives.contains(p));
        }
        assert!(positives.contains(&(0, 1)) && positives.contains(&(2, 3)));
    }

    #[test]
    fn pseudo_label_counts() {
        let z = Array2::from_shape_fn((9, 3), |(i, j)| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        for f in [0.05, 0.1, 0.5, 0.99] {
            let labels = pseudo_labels(&z, f);
            assert_eq!(labels.len(), 36);
            let pos = labels.iter().filter(|l| l.similar).count();
            assert_eq!(pos, (f * 36.0).ceil() as usize);
        }
    }

    #[test]
    fn pair_loss_is_order_invariant() {
        let probs = softmax(&array![[2.0, 0.1, -1.0], [0.3, 0.2, 0.1], [-1.0, 2.5, 0.0], [1.5, 1.0, 1.0]]);
        let z = array![[1.0, 0.2], [0.5, 0.6], [0.1, 1.0], [0.9, 0.35]];
        let (a, _) = pair_loss(&probs, &pseudo_labels(&z, 0.34));
        let perm = [2usize, 0, 3, 1];
        let probs_p = select_rows(&probs, &perm);
        let z_p = select_rows(&z, &perm);
        let (b, _) = pair_loss(&probs_p, &pseudo_labels(&z_p, 0.34));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn pair_loss_gradient_matches_finite_differences() {
        let logits = array![[0.5, -0.2], [0.1, 0.3], [-0.4, 0.8]];
        let labels = vec![
            PairLabel { i: 0, j: 1, similar: true },
            PairLabel { i: 0, j: 2, similar: false },
            PairLabel { i: 1, j: 2, similar: false },
        ];
        let f = |l: &Array2<f64>| pair_loss(&softmax(l), &labels).0;
        let probs = softmax(&logits);
        let (_, dp) = pair_loss(&probs, &labels);
        let analytic = softmax_backward(&probs, &dp);
        let h = 1e-6;
        for idx in [(0, 0), (0, 1), (1, 0), (2, 1)] {
            let mut up = logits.clone();
            up[idx] += h;
            let mut down = logits.clone();
            down[idx] -= h;
            let numeric = (f(&up) - f(&down)) / (2.0 * h);
            assert!((numeric - analytic[idx]).abs() < 1e-7, "{numeric} vs {}", analytic[idx]);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TabularNcdConfig::new(2);
        assert!(cfg.validate().is_ok());
        cfg.joint.top_k_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TabularNcdConfig::new(0);
        assert!(cfg.validate().is_err());
        cfg.k = 2;
        cfg.ssl.corruption_rate = 0.0;
        assert!(cfg.validate().is_err());
    }
}
