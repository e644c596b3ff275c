//! The local learner: a multinomial logistic (softmax) classifier trained by
//! mini-batch gradient descent.
//!
//! Parameters are a `k × d` weight matrix and a length-`k` bias. Whenever the
//! parameters are viewed as one flat vector (gradients, the wire payload,
//! aggregation) the order is row-major weights followed by the bias.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Identifier of a robot in the fleet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl ClientId {
    /// Owner id used for pooled data (full train/test sets) that belong to no robot.
    pub const POOL: ClientId = ClientId(u32::MAX);
}

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "client-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid shape: {features} features and {classes} classes (need at least 1 and 2)")]
    InvalidShape { features: usize, classes: usize },
    #[error("{what}: expected length {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("shard is empty")]
    EmptyShard,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("loss diverged during epoch {epoch}")]
    NonFiniteLoss { epoch: u32 },
    #[error("cannot shrink model from {current} to {requested} classes")]
    ShrinkNotAllowed { current: usize, requested: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Weights and bias of a `num_classes`-way softmax classifier over
/// `num_features` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f64> {
    num_features: usize,
    num_classes: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

/// How fresh parameters are filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Zeros,
    Gaussian { scale: f64, seed: u64 },
}

fn check_shape(d: usize, k: usize) -> Result<()> {
    if d < 1 || k < 2 {
        return Err(ModelError::InvalidShape {
            features: d,
            classes: k,
        });
    }
    Ok(())
}

/// Builds a `k`-class model over `d` features.
pub fn init_params<T: Scalar>(d: usize, k: usize, mode: InitMode) -> Result<ModelParams<T>> {
    check_shape(d, k)?;
    match mode {
        InitMode::Zeros => Ok(ModelParams::zeros_unchecked(d, k)),
        InitMode::Gaussian { scale, seed } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(ModelError::InvalidConfig(format!(
                    "gaussian scale must be positive, got {scale}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64_lossy(z * scale)
            };
            let weights = (0..k * d).map(|_| draw()).collect();
            let bias = (0..k).map(|_| draw()).collect();
            Ok(ModelParams {
                num_features: d,
                num_classes: k,
                weights,
                bias,
            })
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    fn zeros_unchecked(d: usize, k: usize) -> Self {
        Self {
            num_features: d,
            num_classes: k,
            weights: vec![T::zero(); k * d],
            bias: vec![T::zero(); k],
        }
    }

    pub fn zeros(d: usize, k: usize) -> Result<Self> {
        check_shape(d, k)?;
        Ok(Self::zeros_unchecked(d, k))
    }

    /// Assembles parameters from a row-major `k × d` weight buffer and a bias.
    pub fn from_parts(d: usize, k: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        check_shape(d, k)?;
        if weights.len() != k * d {
            return Err(ModelError::ShapeMismatch {
                what: "weights",
                expected: k * d,
                actual: weights.len(),
            });
        }
        if bias.len() != k {
            return Err(ModelError::ShapeMismatch {
                what: "bias",
                expected: k,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("parameters"));
        }
        Ok(Self {
            num_features: d,
            num_classes: k,
            weights,
            bias,
        })
    }

    pub fn from_flat(d: usize, k: usize, flat: &[T]) -> Result<Self> {
        check_shape(d, k)?;
        if flat.len() != k * d + k {
            return Err(ModelError::ShapeMismatch {
                what: "flat parameters",
                expected: k * d + k,
                actual: flat.len(),
            });
        }
        Self::from_parts(d, k, flat[..k * d].to_vec(), flat[k * d..].to_vec())
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `k·d + k`
    pub fn scalar_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn weight_row(&self, class: usize) -> &[T] {
        let d = self.num_features;
        &self.weights[class * d..(class + 1) * d]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.num_features == other.num_features && self.num_classes == other.num_classes
    }

    /// Flat view in wire order: weights row-major, then bias.
    pub fn iter_flat(&self) -> impl Iterator<Item = T> + '_ {
        self.weights.iter().chain(self.bias.iter()).copied()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.iter_flat().collect()
    }

    pub fn l2_norm(&self) -> T {
        self.iter_flat().map(|v| v * v).sum::<T>().sqrt()
    }

    /// Euclidean distance between two same-shaped parameter vectors.
    pub fn distance(&self, other: &Self) -> Result<T> {
        if !self.same_shape(other) {
            return Err(ModelError::ShapeMismatch {
                what: "parameter vector",
                expected: self.scalar_count(),
                actual: other.scalar_count(),
            });
        }
        Ok(self
            .iter_flat()
            .zip(other.iter_flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt())
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.num_features {
            return Err(ModelError::ShapeMismatch {
                what: "feature vector",
                expected: self.num_features,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("feature vector"));
        }
        Ok(())
    }

    fn logits_into(&self, x: &[T], out: &mut [T]) {
        let d = self.num_features;
        for (c, z) in out.iter_mut().enumerate() {
            let row = &self.weights[c * d..(c + 1) * d];
            let mut acc = self.bias[c];
            for (w, xi) in row.iter().zip(x) {
                acc = acc + *w * *xi;
            }
            *z = acc;
        }
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut z = vec![T::zero(); self.num_classes];
        self.logits_into(x, &mut z);
        Ok(z)
    }

    /// Class probabilities `softmax(W·x + b)`.
    pub fn predict(&self, x: &[T]) -> Result<Vec<T>> {
        let mut z = self.logits(x)?;
        softmax_in_place(&mut z);
        // keep every probability strictly positive even for huge logit gaps
        for v in z.iter_mut() {
            *v = v.max(T::min_positive_value());
        }
        Ok(z)
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict_class(&self, x: &[T]) -> Result<usize> {
        let z = self.logits(x)?;
        Ok(argmax(&z))
    }

    /// Grows the output layer to `new_k` classes. Existing rows are kept
    /// bit-for-bit and the new rows start at zero.
    pub fn expand_classes(&self, new_k: usize) -> Result<Self> {
        if new_k < self.num_classes {
            return Err(ModelError::ShrinkNotAllowed {
                current: self.num_classes,
                requested: new_k,
            });
        }
        let mut out = self.clone();
        out.weights.resize(new_k * self.num_features, T::zero());
        out.bias.resize(new_k, T::zero());
        out.num_classes = new_k;
        Ok(out)
    }
}

pub(crate) fn argmax<T: Scalar>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place<T: Scalar>(z: &mut [T]) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    for v in z.iter_mut() {
        *v = *v / sum;
    }
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = z.iter().map(|v| (*v - m).exp()).sum();
    m + s.ln()
}

/// One client's labeled feature rows. Features are stored row-major `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataShard<T = f64> {
    client_id: ClientId,
    num_features: usize,
    features: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> DataShard<T> {
    pub fn new(client_id: ClientId, d: usize, features: Vec<T>, labels: Vec<usize>) -> Result<Self> {
        if d == 0 {
            return Err(ModelError::InvalidShape {
                features: 0,
                classes: 0,
            });
        }
        if features.len() != labels.len() * d {
            return Err(ModelError::ShapeMismatch {
                what: "feature matrix",
                expected: labels.len() * d,
                actual: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("features"));
        }
        Ok(Self {
            client_id,
            num_features: d,
            features,
            labels,
        })
    }

    pub fn empty(client_id: ClientId, d: usize) -> Self {
        Self {
            client_id,
            num_features: d,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn client_id(&self) -> ClientId {
        self.client_id
    }

    pub fn with_client_id(mut self, id: ClientId) -> Self {
        self.client_id = id;
        self
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.num_features;
        &self.features[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[T], usize)> + '_ {
        self.features
            .chunks_exact(self.num_features)
            .zip(self.labels.iter().copied())
    }

    /// Appends one sample. The row must have `num_features` finite entries.
    pub fn push(&mut self, row: &[T], label: usize) -> Result<()> {
        if row.len() != self.num_features {
            return Err(ModelError::ShapeMismatch {
                what: "feature row",
                expected: self.num_features,
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("features"));
        }
        self.features.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    /// New shard holding the given rows of `self`, in the given order.
    pub fn select(&self, indices: &[usize], client_id: ClientId) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            client_id,
            num_features: self.num_features,
            features,
            labels,
        }
    }

    /// Number of samples per label, for labels `0..num_classes`.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                counts[l] += 1;
            }
        }
        counts
    }

    fn check_against(&self, params: &ModelParams<T>) -> Result<()> {
        if self.is_empty() {
            return Err(ModelError::EmptyShard);
        }
        if self.num_features != params.num_features {
            return Err(ModelError::ShapeMismatch {
                what: "shard features",
                expected: params.num_features,
                actual: self.num_features,
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= params.num_classes) {
            return Err(ModelError::LabelOutOfRange {
                label: bad,
                num_classes: params.num_classes,
            });
        }
        Ok(())
    }
}

/// Mean cross-entropy over the shard plus `l2_penalty · ‖W‖² / 2`.
/// The bias is not regularized.
pub fn loss<T: Scalar>(params: &ModelParams<T>, shard: &DataShard<T>, l2_penalty: f64) -> Result<f64> {
    shard.check_against(params)?;
    let mut z = vec![T::zero(); params.num_classes];
    let mut total = T::zero();
    for (x, y) in shard.iter() {
        params.logits_into(x, &mut z);
        total = total + (log_sum_exp(&z) - z[y]);
    }
    let mean = total.to_f64_lossy() / shard.len() as f64;
    let reg = if l2_penalty > 0.0 {
        let sq: T = params.weights.iter().map(|w| *w * *w).sum();
        0.5 * l2_penalty * sq.to_f64_lossy()
    } else {
        0.0
    };
    Ok(mean + reg)
}

/// Adds the summed (not averaged) data gradient over `rows` into `grad`.
fn accumulate_data_gradient<T: Scalar>(
    params: &ModelParams<T>,
    shard: &DataShard<T>,
    rows: &[usize],
    grad: &mut [T],
    scratch: &mut [T],
) {
    let d = params.num_features;
    let k = params.num_classes;
    let (gw, gb) = grad.split_at_mut(k * d);
    for &i in rows {
        let x = shard.row(i);
        params.logits_into(x, scratch);
        softmax_in_place(scratch);
        scratch[shard.labels[i]] = scratch[shard.labels[i]] - T::one();
        for c in 0..k {
            let r = scratch[c];
            gb[c] = gb[c] + r;
            for (g, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                *g = *g + r * *xi;
            }
        }
    }
}

fn batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    shard: &DataShard<T>,
    rows: &[usize],
    l2_penalty: T,
    grad: &mut [T],
    scratch: &mut [T],
) {
    grad.iter_mut().for_each(|g| *g = T::zero());
    accumulate_data_gradient(params, shard, rows, grad, scratch);
    let inv_n = T::one() / T::from_count(rows.len() as u64);
    let kd = params.weights.len();
    for (j, g) in grad.iter_mut().enumerate() {
        *g = *g * inv_n;
        if j < kd {
            *g = *g + l2_penalty * params.weights[j];
        }
    }
}

/// Analytic gradient of [`loss`], flattened as row-major weights then bias.
pub fn gradient<T: Scalar>(params: &ModelParams<T>, shard: &DataShard<T>, l2_penalty: f64) -> Result<Vec<T>> {
    shard.check_against(params)?;
    let rows: Vec<usize> = (0..shard.len()).collect();
    let mut grad = vec![T::zero(); params.scalar_count()];
    let mut scratch = vec![T::zero(); params.num_classes];
    batch_gradient(params, shard, &rows, T::from_f64_lossy(l2_penalty), &mut grad, &mut scratch);
    Ok(grad)
}

/// Local optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub l2_penalty: f64,
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "learning_rate must be a finite value >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "l2_penalty must be a finite value >= 0, got {}",
                self.l2_penalty
            )));
        }
        Ok(())
    }
}

/// Bookkeeping from one call to [`train_local`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_steps: u64,
    /// `grad_steps × batch_size`
    pub compute_units: u64,
}

/// Mini-batch gradient descent over `cfg.epochs` seeded shuffles of the shard.
pub fn train_local<T: Scalar>(
    params: &ModelParams<T>,
    shard: &DataShard<T>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainStats)> {
    cfg.validate()?;
    let loss_before = loss(params, shard, cfg.l2_penalty)?;
    if !loss_before.is_finite() {
        return Err(ModelError::NonFiniteLoss { epoch: 0 });
    }

    let lr = T::from_f64_lossy(cfg.learning_rate);
    let l2 = T::from_f64_lossy(cfg.l2_penalty);
    let kd = params.weights.len();
    let mut model = params.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut grad = vec![T::zero(); params.scalar_count()];
    let mut scratch = vec![T::zero(); params.num_classes];
    let mut grad_steps = 0u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            batch_gradient(&model, shard, batch, l2, &mut grad, &mut scratch);
            let (gw, gb) = grad.split_at(kd);
            for (w, g) in model.weights.iter_mut().zip(gw) {
                *w = *w - lr * *g;
            }
            for (b, g) in model.bias.iter_mut().zip(gb) {
                *b = *b - lr * *g;
            }
            grad_steps += 1;
        }
        if model.iter_flat().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
    }

    let loss_after = loss(&model, shard, cfg.l2_penalty)?;
    if !loss_after.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            epoch: cfg.epochs.saturating_sub(1),
        });
    }
    let stats = TrainStats {
        loss_before,
        loss_after,
        grad_steps,
        compute_units: grad_steps * cfg.batch_size as u64,
    };
    Ok((model, stats))
}
