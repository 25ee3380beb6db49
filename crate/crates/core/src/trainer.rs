//! Deterministic softmax-regression trainer on synthetic Gaussian mixtures.
//!
//! The trainer stands in for the proxy model: it records the loss of every
//! training and validation sample at every epoch (including epoch 0), can
//! retrain on any subset of the training split, and exposes exact analytic
//! gradients for the diagnostics in [`crate::theory`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losslog::{CheckpointGrid, LossLog, Split};
use crate::scoring::DeltaMatrix;
use crate::selection::sample_without_replacement;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("unknown training sample id {0}")]
    UnknownSampleId(u64),
    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Parameters of a Gaussian-mixture classification problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// One mean per class, each of length `input_dim`.
    pub class_means: Vec<Vec<f64>>,
    /// Standard deviation of the isotropic noise around each mean.
    pub noise_scale: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_query: usize,
    pub n_reference: usize,
    /// Fraction of training labels replaced by a uniformly chosen wrong class.
    pub label_noise_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Class means drawn i.i.d. from `N(0, mean_scale^2)` using `seed`.
    pub fn random_means(num_classes: usize, input_dim: usize, mean_scale: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        (0..num_classes)
            .map(|_| {
                (0..input_dim)
                    .map(|_| mean_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>()
            })
            .collect()
    }

    /// The default desk-scale mixture: 5 classes in 20 dimensions, 2000
    /// training points with 10% label noise, and a 20000-point reference split.
    pub fn default_mixture(seed: u64) -> Self {
        Self {
            num_classes: 5,
            input_dim: 20,
            class_means: Self::random_means(5, 20, 0.5, seed),
            noise_scale: 1.0,
            n_train: 2000,
            n_val: 250,
            n_query: 100,
            n_reference: 20000,
            label_noise_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != self.input_dim)
        {
            return bad("class_means must be num_classes x input_dim".into());
        }
        if self.class_means.iter().flatten().any(|v| !v.is_finite()) {
            return bad("class means must be finite".into());
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be positive".into());
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_query == 0 || self.n_reference == 0 {
            return bad("all split sizes must be positive".into());
        }
        if self.n_reference < 10 * self.n_train {
            return bad("reference split must be at least 10x the training split".into());
        }
        if !(0.0..1.0).contains(&self.label_noise_fraction) {
            return bad("label_noise_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Features and labels of one split. Ids are `0..n` within the split.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub ids: Vec<u64>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i], self.labels[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train: Samples,
    /// Mixture component of each training point before label noise.
    pub train_clean_labels: Vec<usize>,
    pub validation: Samples,
    pub query: Samples,
    pub reference: Samples,
}

impl Dataset {
    /// Training ids whose observed label differs from the generating component.
    pub fn noisy_train_ids(&self) -> Vec<u64> {
        (0..self.train.len())
            .filter(|&i| self.train.labels[i] != self.train_clean_labels[i])
            .map(|i| self.train.ids[i])
            .collect()
    }
}

/// Draws all four splits. Sample `i` of every split comes from component
/// `i mod C`, so splits are class-balanced; label noise touches only the
/// training split.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |n: usize| -> Samples {
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.num_classes;
            let x = spec.class_means[c]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.noise_scale * z
                })
                .collect();
            features.push(x);
            labels.push(c);
        }
        Samples {
            ids: (0..n as u64).collect(),
            features,
            labels,
        }
    };
    let mut train = draw(spec.n_train);
    let validation = draw(spec.n_val);
    let query = draw(spec.n_query);
    let reference = draw(spec.n_reference);

    let clean = train.labels.clone();
    let noisy = (spec.label_noise_fraction * spec.n_train as f64).round() as usize;
    let positions: Vec<usize> = (0..spec.n_train).collect();
    for i in sample_without_replacement(&mut rng, &positions, noisy) {
        let shift = 1 + rand::Rng::random_range(&mut rng, 0..spec.num_classes as u64 - 1) as usize;
        train.labels[i] = (clean[i] + shift) % spec.num_classes;
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        input_dim: spec.input_dim,
        train,
        train_clean_labels: clean,
        validation,
        query,
        reference,
    })
}

/// Softmax-regression parameters laid out as `C` rows of `[w_c (d values), b_c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub num_classes: usize,
    pub input_dim: usize,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(num_classes: usize, input_dim: usize) -> Self {
        Self {
            num_classes,
            input_dim,
            theta: vec![0.0; num_classes * (input_dim + 1)],
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    fn row(&self, c: usize) -> &[f64] {
        let w = self.input_dim + 1;
        &self.theta[c * w..(c + 1) * w]
    }

    pub fn weight(&self, class: usize, j: usize) -> f64 {
        self.row(class)[j]
    }

    pub fn bias(&self, class: usize) -> f64 {
        self.row(class)[self.input_dim]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                let r = self.row(c);
                r[..self.input_dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + r[self.input_dim]
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Cross-entropy `logsumexp(z) - z_y`.
    pub fn loss(&self, x: &[f64], y: usize) -> f64 {
        let z = self.logits(x);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        // Rounding can leave a tiny negative value when the model is certain.
        (lse - z[y]).max(0.0)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best
    }
}

fn add_sample_gradient(params: &ModelParams, x: &[f64], y: usize, scale: f64, out: &mut [f64]) {
    let p = params.probabilities(x);
    let w = params.input_dim + 1;
    for c in 0..params.num_classes {
        let err = (p[c] - if c == y { 1.0 } else { 0.0 }) * scale;
        let row = &mut out[c * w..(c + 1) * w];
        for j in 0..params.input_dim {
            row[j] += err * x[j];
        }
        row[params.input_dim] += err;
    }
}

/// Exact gradient of the cross-entropy of one sample.
pub fn per_sample_gradient(params: &ModelParams, x: &[f64], y: usize) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    add_sample_gradient(params, x, y, 1.0, &mut g);
    g
}

/// Mean gradient over the samples at `indices`, accumulated in index order.
pub fn batch_gradient(params: &ModelParams, samples: &Samples, indices: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    for &i in indices {
        let (x, y) = samples.sample(i);
        add_sample_gradient(params, x, y, 1.0, &mut g);
    }
    let n = indices.len().max(1) as f64;
    g.iter_mut().for_each(|v| *v /= n);
    g
}

/// Mean gradient over a whole split.
pub fn split_gradient(params: &ModelParams, samples: &Samples) -> Vec<f64> {
    let all: Vec<usize> = (0..samples.len()).collect();
    batch_gradient(params, samples, &all)
}

/// Gradient of the population-risk proxy (the reference split).
pub fn reference_gradient(params: &ModelParams, data: &Dataset) -> Vec<f64> {
    split_gradient(params, &data.reference)
}

/// Per-sample losses of a split, in split order.
pub fn sample_losses(params: &ModelParams, samples: &Samples) -> Vec<f64> {
    (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = samples.sample(i);
            params.loss(x, y)
        })
        .collect()
}

/// Mean loss and accuracy on a split.
pub fn evaluate(params: &ModelParams, samples: &Samples) -> (f64, f64) {
    let losses = sample_losses(params, samples);
    let correct = (0..samples.len())
        .into_par_iter()
        .filter(|&i| {
            let (x, y) = samples.sample(i);
            params.predict(x) == y
        })
        .count();
    let n = samples.len().max(1) as f64;
    (losses.iter().sum::<f64>() / n, correct as f64 / n)
}

/// Mean loss over the samples at `indices`, summed in index order.
pub fn subset_mean_loss(params: &ModelParams, samples: &Samples, indices: &[usize]) -> f64 {
    let total: f64 = indices
        .iter()
        .map(|&i| {
            let (x, y) = samples.sample(i);
            params.loss(x, y)
        })
        .sum();
    total / indices.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zero,
    /// Every parameter drawn from `N(0, scale^2)` using the config seed.
    Gaussian { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Mini-batch size; 0 means full-batch gradient descent.
    pub batch_size: usize,
    pub seed: u64,
    pub record_parameter_snapshots: bool,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 60,
            batch_size: 0,
            seed: 0,
            record_parameter_snapshots: false,
            init: Init::Zero,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if let Init::Gaussian { scale } = self.init {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(TrainError::InvalidConfig("init scale must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ModelParams,
    /// Parameters at checkpoints `0..=T`, when requested.
    pub snapshots: Option<Vec<ModelParams>>,
    pub train_log: LossLog,
    pub validation_log: LossLog,
    /// Mean loss over the samples being trained on, at checkpoints `0..=T`.
    pub mean_train_loss: Vec<f64>,
    /// Indices (into the training split) of the samples that were trained on.
    pub trained_indices: Vec<usize>,
}

fn initial_params(data: &Dataset, config: &TrainConfig) -> ModelParams {
    let mut p = ModelParams::zeros(data.num_classes, data.input_dim);
    if let Init::Gaussian { scale } = config.init {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        for v in &mut p.theta {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale * z;
        }
    }
    p
}

/// Maps training sample ids to positions in the training split.
pub fn train_positions(data: &Dataset, ids: &[u64]) -> Result<Vec<usize>> {
    let index: HashMap<u64, usize> = data.train.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut pos = ids
        .iter()
        .map(|id| index.get(id).copied().ok_or(TrainError::UnknownSampleId(*id)))
        .collect::<Result<Vec<_>>>()?;
    pos.sort_unstable();
    pos.dedup();
    Ok(pos)
}

/// Runs (mini-batch) gradient descent on the training split, or on `subset`
/// when given, logging per-sample losses of the whole training and validation
/// splits at every epoch boundary including initialization.
pub fn train_and_log(data: &Dataset, config: &TrainConfig, subset: Option<&[u64]>) -> Result<TrainResult> {
    config.validate()?;
    let trained = match subset {
        Some(ids) => train_positions(data, ids)?,
        None => (0..data.train.len()).collect(),
    };
    if trained.is_empty() {
        return Err(TrainError::InvalidConfig("cannot train on an empty subset".into()));
    }
    let mut params = initial_params(data, config);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(2);

    let mut train_rows: Vec<Vec<f64>> = vec![Vec::with_capacity(config.epochs + 1); data.train.len()];
    let mut val_rows: Vec<Vec<f64>> = vec![Vec::with_capacity(config.epochs + 1); data.validation.len()];
    let mut mean_train_loss = Vec::with_capacity(config.epochs + 1);
    let mut snapshots = config.record_parameter_snapshots.then(Vec::new);

    let mut record = |params: &ModelParams, epoch: usize| -> Result<()> {
        let tl = sample_losses(params, &data.train);
        let vl = sample_losses(params, &data.validation);
        if tl.iter().chain(&vl).any(|v| !v.is_finite()) {
            return Err(TrainError::DivergedLoss { epoch });
        }
        mean_train_loss.push(trained.iter().map(|&i| tl[i]).sum::<f64>() / trained.len() as f64);
        for (row, v) in train_rows.iter_mut().zip(tl) {
            row.push(v);
        }
        for (row, v) in val_rows.iter_mut().zip(vl) {
            row.push(v);
        }
        if let Some(s) = snapshots.as_mut() {
            s.push(params.clone());
        }
        Ok(())
    };

    record(&params, 0)?;
    let full_batch = config.batch_size == 0 || config.batch_size >= trained.len();
    for epoch in 1..=config.epochs {
        if full_batch {
            let g = batch_gradient(&params, &data.train, &trained);
            step(&mut params, &g, config.learning_rate);
        } else {
            let order = sample_without_replacement(&mut batch_rng, &trained, trained.len());
            for batch in order.chunks(config.batch_size) {
                let g = batch_gradient(&params, &data.train, batch);
                step(&mut params, &g, config.learning_rate);
            }
        }
        if params.theta.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::DivergedLoss { epoch });
        }
        record(&params, epoch)?;
    }

    let grid = CheckpointGrid::dense(config.epochs as u64).expect("epochs >= 1");
    let train_log = LossLog::new(
        Split::Train,
        data.train.ids.clone(),
        data.train.labels.clone(),
        grid.clone(),
        train_rows,
    )
    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let validation_log = LossLog::new(
        Split::Validation,
        data.validation.ids.clone(),
        data.validation.labels.clone(),
        grid,
        val_rows,
    )
    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    Ok(TrainResult {
        params,
        snapshots,
        train_log,
        validation_log,
        mean_train_loss,
        trained_indices: trained,
    })
}

fn step(params: &mut ModelParams, grad: &[f64], lr: f64) {
    for (p, g) in params.theta.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Loss-difference trajectories of any split, recomputed from snapshots.
pub fn split_deltas(snapshots: &[ModelParams], samples: &Samples) -> DeltaMatrix {
    let per_ckpt: Vec<Vec<f64>> = snapshots.iter().map(|p| sample_losses(p, samples)).collect();
    let deltas = (0..samples.len())
        .map(|i| per_ckpt.windows(2).map(|w| w[1][i] - w[0][i]).collect())
        .collect();
    DeltaMatrix::new(samples.ids.clone(), samples.labels.clone(), deltas)
        .expect("snapshots yield finite rectangular deltas")
}
