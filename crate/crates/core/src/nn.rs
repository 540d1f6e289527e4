//! Dense feed-forward networks trained by mini-batch gradient descent.
//!
//! An [`Mlp`] is a trunk of hidden layers plus any number of named heads
//! that read the trunk's final activation. Gradients are computed by hand
//! written backpropagation; both NCD models drive training through
//! [`Mlp::forward_pass`], [`Mlp::backward`] and an [`Optimizer`].

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Sigmoid,
    Tanh,
    None,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            Activation::None => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation, dropout: f64) -> Self {
        Self {
            width,
            activation,
            dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    pub hidden: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::BadConfig("input_dim must be at least 1".into()));
        }
        for (i, l) in self.hidden.iter().enumerate() {
            if l.width == 0 {
                return Err(Error::BadConfig(format!("hidden layer {i} has width 0")));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::BadConfig(format!(
                    "hidden layer {i} dropout {} outside [0, 1)",
                    l.dropout
                )));
            }
        }
        Ok(())
    }

    /// Width of the trunk embedding.
    pub fn embedding_dim(&self) -> usize {
        self.hidden.last().map(|l| l.width).unwrap_or(self.input_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub width: usize,
    pub activation: Activation,
}

impl HeadSpec {
    pub fn new(name: impl Into<String>, width: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            width,
            activation,
        }
    }
}

/// One affine map `x W + b` with `W` shaped (inputs, outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..=limit));
        Self {
            weights,
            bias: Array1::zeros(fan_out),
        }
    }

    fn affine(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub spec: HeadSpec,
    pub layer: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: ArchitectureSpec,
    pub layers: Vec<Dense>,
    pub heads: BTreeMap<String, Head>,
}

pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

/// Activations retained for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input to each trunk layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    /// Scaled dropout masks (`0` or `1/(1-p)`), one per trunk layer.
    masks: Vec<Option<Array2<f64>>>,
    /// Final trunk activation as seen by the heads.
    pub embedding: Array2<f64>,
    /// Per head: (pre-activation, output).
    pub heads: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl ForwardPass {
    pub fn logits(&self, head: &str) -> Result<&Array2<f64>> {
        self.heads
            .get(head)
            .map(|h| &h.0)
            .ok_or_else(|| Error::UnknownHead(head.to_string()))
    }

    pub fn output(&self, head: &str) -> Result<&Array2<f64>> {
        self.heads
            .get(head)
            .map(|h| &h.1)
            .ok_or_else(|| Error::UnknownHead(head.to_string()))
    }
}

/// Parameter gradients laid out like the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    pub heads: BTreeMap<String, Dense>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        let z = |d: &Dense| Dense {
            weights: Array2::zeros(d.weights.raw_dim()),
            bias: Array1::zeros(d.bias.raw_dim()),
        };
        Self {
            layers: mlp.layers.iter().map(z).collect(),
            heads: mlp.heads.iter().map(|(k, h)| (k.clone(), z(&h.layer))).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(a).and(b).for_each(|x, &y| *x += y);
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for d in self.layers.iter().chain(self.heads.values()) {
            out.push(d.weights.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for d in self.layers.iter_mut().chain(self.heads.values_mut()) {
            out.push(d.weights.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp(spec: &ArchitectureSpec, heads: &[HeadSpec], seed: u64) -> Result<Mlp> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let mut layers = Vec::with_capacity(spec.hidden.len());
    let mut prev = spec.input_dim;
    for l in &spec.hidden {
        layers.push(Dense::glorot(prev, l.width, &mut rng));
        prev = l.width;
    }
    let mut mlp = Mlp {
        spec: spec.clone(),
        layers,
        heads: BTreeMap::new(),
    };
    for h in heads {
        mlp.attach_head(h.clone(), &mut rng)?;
    }
    Ok(mlp)
}

impl Mlp {
    pub fn attach_head(&mut self, spec: HeadSpec, rng: &mut Rng) -> Result<()> {
        if spec.width == 0 {
            return Err(Error::BadConfig(format!("head {:?} has width 0", spec.name)));
        }
        let layer = Dense::glorot(self.spec.embedding_dim(), spec.width, rng);
        self.heads.insert(spec.name.clone(), Head { spec, layer });
        Ok(())
    }

    pub fn remove_head(&mut self, name: &str) -> Option<Head> {
        self.heads.remove(name)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        let all = self.layers.iter().chain(self.heads.values().map(|h| &h.layer));
        for d in all {
            out.push(d.weights.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        let all = self
            .layers
            .iter_mut()
            .chain(self.heads.values_mut().map(|h| &mut h.layer));
        for d in all {
            out.push(d.weights.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::ShapeError(format!(
                "expected {} input columns, got {}",
                self.spec.input_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Runs the trunk and the listed heads, keeping what backprop needs.
    pub fn forward_pass(&self, x: &Array2<f64>, heads: &[&str], mode: Mode<'_>) -> Result<ForwardPass> {
        self.check_input(x)?;
        for h in heads {
            if !self.heads.contains_key(*h) {
                return Err(Error::UnknownHead(h.to_string()));
            }
        }
        let mut rng = match mode {
            Mode::Train(r) => Some(r),
            Mode::Eval => None,
        };
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut cur = x.to_owned();
        for (layer, spec) in self.layers.iter().zip(&self.spec.hidden) {
            let z = layer.affine(&cur);
            let a = z.mapv(|v| spec.activation.apply(v));
            let (out, mask) = match rng.as_deref_mut() {
                Some(r) if spec.dropout > 0.0 => {
                    let keep = 1.0 - spec.dropout;
                    let mask = Array2::from_shape_fn(a.raw_dim(), |_| {
                        if r.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    (&a * &mask, Some(mask))
                }
                _ => (a.clone(), None),
            };
            inputs.push(std::mem::replace(&mut cur, out));
            pre.push(z);
            post.push(a);
            masks.push(mask);
        }
        let embedding = cur;
        let mut head_out = BTreeMap::new();
        for &h in heads {
            let head = &self.heads[h];
            let z = head.layer.affine(&embedding);
            let a = z.mapv(|v| head.spec.activation.apply(v));
            head_out.insert(h.to_string(), (z, a));
        }
        Ok(ForwardPass {
            inputs,
            pre,
            post,
            masks,
            embedding,
            heads: head_out,
        })
    }

    /// Returns (head output, trunk embedding).
    pub fn forward(&self, x: &Array2<f64>, head: &str, mode: Mode<'_>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut pass = self.forward_pass(x, &[head], mode)?;
        let (_, out) = pass.heads.remove(head).expect("requested head");
        Ok((out, pass.embedding))
    }

    /// Eval-mode trunk embedding.
    pub fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_pass(x, &[], Mode::Eval)?.embedding)
    }

    /// Backpropagates gradients given w.r.t. head pre-activations
    /// (`head_logit_grads`) plus an optional direct gradient w.r.t. the
    /// embedding.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        head_logit_grads: &[(&str, Array2<f64>)],
        embedding_grad: Option<&Array2<f64>>,
    ) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        let mut d_emb: Array2<f64> = match embedding_grad {
            Some(g) => g.clone(),
            None => Array2::zeros(pass.embedding.raw_dim()),
        };
        for (name, dz) in head_logit_grads {
            let head = self
                .heads
                .get(*name)
                .ok_or_else(|| Error::UnknownHead(name.to_string()))?;
            let g = grads.heads.get_mut(*name).expect("zeros_like covers heads");
            g.weights += &pass.embedding.t().dot(dz);
            g.bias += &dz.sum_axis(Axis(0));
            d_emb += &dz.dot(&head.layer.weights.t());
        }
        let mut upstream = d_emb;
        for l in (0..self.layers.len()).rev() {
            if let Some(mask) = &pass.masks[l] {
                upstream *= mask;
            }
            let act = self.spec.hidden[l].activation;
            let mut dz = upstream;
            Zip::from(&mut dz)
                .and(&pass.pre[l])
                .and(&pass.post[l])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            grads.layers[l].weights += &pass.inputs[l].t().dot(&dz);
            grads.layers[l].bias += &dz.sum_axis(Axis(0));
            upstream = dz.dot(&self.layers[l].weights.t());
        }
        Ok(grads)
    }

    /// Forward + loss + backward for a standard loss.
    pub fn loss_and_gradients(
        &self,
        x: &Array2<f64>,
        loss: &Loss,
        targets: &[Target],
        mode: Mode<'_>,
    ) -> Result<(f64, Gradients)> {
        let heads: Vec<&str> = loss.terms.iter().map(|t| t.head.as_str()).collect();
        let pass = self.forward_pass(x, &heads, mode)?;
        let (value, head_grads) = loss.evaluate(self, &pass, targets)?;
        let refs: Vec<(&str, Array2<f64>)> =
            head_grads.into_iter().map(|(k, v)| (k, v)).collect::<Vec<_>>();
        let grads = self.backward(&pass, &refs, None)?;
        Ok((value, grads))
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Softmax cross-entropy over the head output read as logits.
    CrossEntropy,
    Mse,
    /// Binary cross-entropy; fused with the sigmoid when the head has one.
    Bce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub head: String,
    pub kind: LossKind,
    pub weight: f64,
}

/// A weighted sum of per-head loss terms. Single-term losses are the
/// plain cross-entropy / MSE / BCE cases.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub terms: Vec<LossTerm>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Classes(Vec<usize>),
    Dense(Array2<f64>),
}

impl Loss {
    fn single(head: &str, kind: LossKind) -> Self {
        Self {
            terms: vec![LossTerm {
                head: head.to_string(),
                kind,
                weight: 1.0,
            }],
        }
    }

    pub fn cross_entropy(head: &str) -> Self {
        Self::single(head, LossKind::CrossEntropy)
    }

    pub fn mse(head: &str) -> Self {
        Self::single(head, LossKind::Mse)
    }

    pub fn bce(head: &str) -> Self {
        Self::single(head, LossKind::Bce)
    }

    pub fn composite(terms: Vec<(&str, LossKind, f64)>) -> Self {
        Self {
            terms: terms
                .into_iter()
                .map(|(head, kind, weight)| LossTerm {
                    head: head.to_string(),
                    kind,
                    weight,
                })
                .collect(),
        }
    }

    /// Loss value and gradients w.r.t. each head's pre-activation.
    pub fn evaluate<'a>(
        &'a self,
        mlp: &Mlp,
        pass: &ForwardPass,
        targets: &[Target],
    ) -> Result<(f64, Vec<(&'a str, Array2<f64>)>)> {
        if targets.len() != self.terms.len() {
            return Err(Error::ShapeError(format!(
                "{} loss terms but {} targets",
                self.terms.len(),
                targets.len()
            )));
        }
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(self.terms.len());
        for (term, target) in self.terms.iter().zip(targets) {
            let head = mlp
                .heads
                .get(&term.head)
                .ok_or_else(|| Error::UnknownHead(term.head.clone()))?;
            let (z, a) = pass
                .heads
                .get(&term.head)
                .ok_or_else(|| Error::UnknownHead(term.head.clone()))?;
            let act = head.spec.activation;
            let (value, mut dz) = match (term.kind, target) {
                (LossKind::CrossEntropy, Target::Classes(c)) => {
                    let (v, da) = cross_entropy(a, c)?;
                    (v, chain_activation(act, z, a, da))
                }
                (LossKind::Mse, Target::Dense(t)) => {
                    let (v, da) = mse(a, t)?;
                    (v, chain_activation(act, z, a, da))
                }
                (LossKind::Bce, Target::Dense(t)) if act == Activation::Sigmoid => bce_with_logits(z, t)?,
                (LossKind::Bce, Target::Dense(t)) => {
                    let (v, da) = bce_probabilities(a, t)?;
                    (v, chain_activation(act, z, a, da))
                }
                _ => {
                    return Err(Error::ShapeError(format!(
                        "target type does not match {:?} loss on head {:?}",
                        term.kind, term.head
                    )))
                }
            };
            dz *= term.weight;
            total += term.weight * value;
            grads.push((term.head.as_str(), dz));
        }
        Ok((total, grads))
    }
}

fn chain_activation(act: Activation, z: &Array2<f64>, a: &Array2<f64>, mut da: Array2<f64>) -> Array2<f64> {
    if act != Activation::None {
        Zip::from(&mut da)
            .and(z)
            .and(a)
            .for_each(|d, &z, &a| *d *= act.derivative(z, a));
    }
    da
}

/// Row-wise softmax, stable for large logits.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, classes: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if classes.len() != n {
        return Err(Error::ShapeError(format!("{} targets for {n} rows", classes.len())));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::ShapeError(format!("class {bad} out of range for {c} logits")));
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &k) in classes.iter().enumerate() {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[k];
        grad[[i, k]] -= 1.0;
    }
    let scale = 1.0 / n.max(1) as f64;
    grad *= scale;
    Ok((loss * scale, grad))
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeError(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse(out: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(out, target)?;
    let m = out.len().max(1) as f64;
    let diff = out - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / m;
    Ok((loss, diff * (2.0 / m)))
}

/// Mean binary cross-entropy computed from logits.
pub fn bce_with_logits(z: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(z, target)?;
    let m = z.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(z.raw_dim());
    Zip::from(&mut grad).and(z).and(target).for_each(|g, &z, &y| {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - y) / m;
    });
    Ok((loss / m, grad))
}

const PROB_EPS: f64 = 1e-12;

/// Mean binary cross-entropy from probabilities (clamped away from 0 and 1).
pub fn bce_probabilities(p: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(p, target)?;
    let m = p.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(p.raw_dim());
    Zip::from(&mut grad).and(p).and(target).for_each(|g, &p, &y| {
        let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        *g = (q - y) / (q * (1.0 - q)) / m;
    });
    Ok((loss / m, grad))
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::BadConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::BadConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer state for one fixed parameter layout.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    /// Builds an optimizer; `learning_rate` is not validated here so that a
    /// zero rate can be used to evaluate without moving the parameters.
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.optimizer, cfg.learning_rate)
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::DivergedError("non-finite gradient".into()));
        }
        let params = mlp.tensors_mut();
        let g = grads.tensors();
        if params.len() != g.len() || params.iter().zip(&g).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::ShapeError("gradient layout does not match network".into()));
        }
        if self.first.len() != params.len() {
            self.first = g.iter().map(|t| vec![0.0; t.len()]).collect();
            self.second = g.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), v) in params.into_iter().zip(g).zip(&mut self.first) {
                    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = momentum * *v - lr * g;
                        *p += *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(g)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *p -= lr * mhat / (vhat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub targets: Vec<Target>,
}

/// Fisher–Yates shuffled row indices cut into batches; the last batch may
/// be short.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

pub fn select_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// One optimizer step per batch. Returns the mean per-batch loss.
pub fn train_epoch(
    mlp: &mut Mlp,
    optimizer: &mut Optimizer,
    batches: impl IntoIterator<Item = Batch>,
    loss: &Loss,
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let (value, grads) = mlp.loss_and_gradients(&batch.x, loss, &batch.targets, Mode::Train(rng))?;
        if !value.is_finite() {
            return Err(Error::DivergedError(format!("loss became {value}")));
        }
        optimizer.step(mlp, &grads)?;
        total += value;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "ncdkit-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Mlp,
}

impl Mlp {
    /// Structured-text checkpoint. Loading and re-saving reproduces the same
    /// bytes.
    pub fn to_checkpoint(&self) -> String {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string(&ckpt).expect("mlp serializes")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mlp = ckpt.model;
        mlp.spec.validate()?;
        let mut prev = mlp.spec.input_dim;
        if mlp.layers.len() != mlp.spec.hidden.len() {
            return Err(Error::Checkpoint("layer count does not match spec".into()));
        }
        for (layer, spec) in mlp.layers.iter().zip(&mlp.spec.hidden) {
            if layer.weights.dim() != (prev, spec.width) || layer.bias.len() != spec.width {
                return Err(Error::Checkpoint("layer shape does not match spec".into()));
            }
            prev = spec.width;
        }
        for h in mlp.heads.values() {
            if h.layer.weights.dim() != (prev, h.spec.width) || h.layer.bias.len() != h.spec.width {
                return Err(Error::Checkpoint(format!("head {:?} has wrong shape", h.spec.name)));
            }
        }
        Ok(mlp)
    }
}
