//! Empirical checks of the coreset convergence argument on trainer runs.
//!
//! Every quantity is measured with exact gradients at recorded parameter
//! snapshots of a model trained on a coreset `C`:
//!
//! * `kappa_t = 1 - min_m cos(grad l(theta_t, z_m), G_V(theta_t))` over `m` in `C`
//! * `E_t = |gamma_t - G_ref(theta_t)|`, with `gamma_t` the mean coreset gradient
//! * `delta_t = |G_V(theta_t) - G_ref(theta_t)|`
//! * `B` the largest per-sample gradient norm seen on the coreset and the
//!   validation split
//!
//! The reference split stands in for the population risk.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::{
    self, batch_gradient, per_sample_gradient, split_gradient, subset_mean_loss, train_positions, Dataset,
    Init, ModelParams, TrainConfig, TrainError, TrainResult,
};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("training run has no parameter snapshots")]
    MissingSnapshots,
    #[error("need at least 2 snapshots")]
    TooFewSnapshots,
    #[error("every step has zero displacement")]
    AllStepsZero,
    #[error("coreset is empty")]
    EmptyCoreset,
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = TheoryError> = std::result::Result<T, E>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointAlignment {
    pub checkpoint: usize,
    /// True when `G_V` vanishes and the cosines are undefined.
    pub flagged: bool,
    pub cosines: Vec<f64>,
    pub kappa: f64,
    pub subset_gap: f64,
    pub validation_gap: f64,
    /// `B sqrt(2 kappa_t) + delta_t`.
    pub lemma_bound: f64,
    pub lemma_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub coreset_size: usize,
    pub gradient_bound: f64,
    pub checkpoints: Vec<CheckpointAlignment>,
}

impl AlignmentReport {
    /// Largest `kappa_t` over unflagged checkpoints `t < upto`.
    pub fn max_kappa(&self, upto: usize) -> f64 {
        self.unflagged(upto).map(|c| c.kappa).fold(0.0, f64::max)
    }

    /// Largest `delta_t` over unflagged checkpoints `t < upto`.
    pub fn max_delta(&self, upto: usize) -> f64 {
        self.unflagged(upto).map(|c| c.validation_gap).fold(0.0, f64::max)
    }

    pub fn lemma_holds(&self) -> bool {
        self.checkpoints.iter().all(|c| c.flagged || c.lemma_holds)
    }

    fn unflagged(&self, upto: usize) -> impl Iterator<Item = &CheckpointAlignment> {
        self.checkpoints.iter().filter(move |c| !c.flagged && c.checkpoint < upto)
    }
}

/// Measures gradient alignment of the coreset with the validation gradient
/// at every snapshot of `run`.
pub fn alignment_diagnostics(run: &TrainResult, coreset: &[u64], data: &Dataset) -> Result<AlignmentReport> {
    let snapshots = run.snapshots.as_ref().ok_or(TheoryError::MissingSnapshots)?;
    let members = train_positions(data, coreset)?;
    if members.is_empty() {
        return Err(TheoryError::EmptyCoreset);
    }

    struct Raw {
        sample_grads: Vec<Vec<f64>>,
        gamma: Vec<f64>,
        g_val: Vec<f64>,
        g_ref: Vec<f64>,
        max_norm: f64,
    }
    let raw: Vec<Raw> = snapshots
        .iter()
        .map(|p| {
            let sample_grads: Vec<Vec<f64>> = members
                .iter()
                .map(|&i| {
                    let (x, y) = data.train.sample(i);
                    per_sample_gradient(p, x, y)
                })
                .collect();
            let gamma = batch_gradient(p, &data.train, &members);
            let val_norm = (0..data.validation.len())
                .map(|j| {
                    let (x, y) = data.validation.sample(j);
                    norm(&per_sample_gradient(p, x, y))
                })
                .fold(0.0, f64::max);
            let max_norm = sample_grads.iter().map(|g| norm(g)).fold(val_norm, f64::max);
            Raw {
                sample_grads,
                gamma,
                g_val: split_gradient(p, &data.validation),
                g_ref: trainer::reference_gradient(p, data),
                max_norm,
            }
        })
        .collect();
    let bound_b = raw.iter().map(|r| r.max_norm).fold(0.0, f64::max);

    let checkpoints = raw
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let flagged = norm(&r.g_val) == 0.0;
            let cosines: Vec<f64> = if flagged {
                Vec::new()
            } else {
                r.sample_grads.iter().map(|g| cosine(g, &r.g_val)).collect()
            };
            let kappa = if flagged {
                0.0
            } else {
                1.0 - cosines.iter().copied().fold(f64::INFINITY, f64::min)
            };
            let subset_gap = dist(&r.gamma, &r.g_ref);
            let validation_gap = dist(&r.g_val, &r.g_ref);
            let lemma_bound = bound_b * (2.0 * kappa).sqrt() + validation_gap;
            CheckpointAlignment {
                checkpoint: t,
                flagged,
                cosines,
                kappa,
                subset_gap,
                validation_gap,
                lemma_bound,
                lemma_holds: flagged || subset_gap <= lemma_bound * (1.0 + 1e-12),
            }
        })
        .collect();
    Ok(AlignmentReport {
        coreset_size: members.len(),
        gradient_bound: bound_b,
        checkpoints,
    })
}

/// Secant smoothness estimate along a trajectory: the largest
/// `|grad(p_{t+1}) - grad(p_t)| / |p_{t+1} - p_t|` over consecutive points,
/// times a safety factor of 2. Zero-length steps are skipped.
pub fn smoothness_estimate<F>(points: &[Vec<f64>], grad: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if points.len() < 2 {
        return Err(TheoryError::TooFewSnapshots);
    }
    let grads: Vec<Vec<f64>> = points.iter().map(|p| grad(p)).collect();
    let mut best: Option<f64> = None;
    for t in 0..points.len() - 1 {
        let step = dist(&points[t + 1], &points[t]);
        if step == 0.0 {
            continue;
        }
        let ratio = dist(&grads[t + 1], &grads[t]) / step;
        best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
    }
    best.map(|b| 2.0 * b).ok_or(TheoryError::AllStepsZero)
}

/// Smoothness estimate for a coreset run: the larger of the estimates for the
/// coreset objective and for the reference risk.
pub fn run_smoothness(snapshots: &[ModelParams], coreset: &[u64], data: &Dataset) -> Result<f64> {
    let members = train_positions(data, coreset)?;
    let (c, d) = (data.num_classes, data.input_dim);
    let wrap = |theta: &[f64]| ModelParams {
        num_classes: c,
        input_dim: d,
        theta: theta.to_vec(),
    };
    let points: Vec<Vec<f64>> = snapshots.iter().map(|p| p.theta.clone()).collect();
    let on_coreset = smoothness_estimate(&points, |t| batch_gradient(&wrap(t), &data.train, &members))?;
    let on_reference = smoothness_estimate(&points, |t| trainer::reference_gradient(&wrap(t), data))?;
    Ok(on_coreset.max(on_reference))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentStep {
    pub step: usize,
    pub risk_next: f64,
    pub upper_bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub smoothness: f64,
    pub learning_rate: f64,
    /// False when `eta > 1 / L`, in which case the bound is not guaranteed.
    pub step_size_ok: bool,
    pub epochs: usize,
    pub initial_risk: f64,
    pub min_grad_norm_sq: f64,
    pub kappa: f64,
    pub delta: f64,
    pub gradient_bound: f64,
    pub optimization_term: f64,
    pub smoothness_term: f64,
    pub alignment_term: f64,
    pub bound: f64,
    pub slack: f64,
    pub bound_holds: bool,
    pub descent: Vec<DescentStep>,
    pub descent_holds: bool,
}

/// Absolute tolerance of the per-step descent inequality.
pub const DESCENT_TOLERANCE: f64 = 1e-9;

/// Checks the convergence bound
/// `min_t |grad R(theta_t)|^2 <= 2 R(theta_0) / (eta T) + L eta B^2 + (B sqrt(2 kappa) + delta)^2`
/// and the per-step descent inequality
/// `R_{t+1} <= R_t - eta <G_t, gamma_t> + L eta^2 / 2 |gamma_t|^2`
/// on a full-batch coreset run. The infimum of the risk is taken as 0.
pub fn theorem1_check(
    run: &TrainResult,
    coreset: &[u64],
    data: &Dataset,
    smoothness: f64,
    learning_rate: f64,
) -> Result<BoundReport> {
    let snapshots = run.snapshots.as_ref().ok_or(TheoryError::MissingSnapshots)?;
    if snapshots.len() < 2 {
        return Err(TheoryError::TooFewSnapshots);
    }
    let members = train_positions(data, coreset)?;
    let epochs = snapshots.len() - 1;
    let alignment = alignment_diagnostics(run, coreset, data)?;
    let all_ref: Vec<usize> = (0..data.reference.len()).collect();

    let risks: Vec<f64> = snapshots
        .iter()
        .map(|p| subset_mean_loss(p, &data.reference, &all_ref))
        .collect();
    let ref_grads: Vec<Vec<f64>> = snapshots[..epochs]
        .iter()
        .map(|p| trainer::reference_gradient(p, data))
        .collect();
    let min_grad_norm_sq = ref_grads.iter().map(|g| dot(g, g)).fold(f64::INFINITY, f64::min);

    let kappa = alignment.max_kappa(epochs);
    let delta = alignment.max_delta(epochs);
    let b = alignment.gradient_bound;
    let eta = learning_rate;
    let optimization_term = 2.0 * risks[0] / (eta * epochs as f64);
    let smoothness_term = smoothness * eta * b * b;
    let alignment_term = (b * (2.0 * kappa).sqrt() + delta).powi(2);
    let bound = optimization_term + smoothness_term + alignment_term;

    let descent: Vec<DescentStep> = (0..epochs)
        .map(|t| {
            let gamma = batch_gradient(&snapshots[t], &data.train, &members);
            let upper = risks[t] - eta * dot(&ref_grads[t], &gamma)
                + 0.5 * smoothness * eta * eta * dot(&gamma, &gamma);
            DescentStep {
                step: t,
                risk_next: risks[t + 1],
                upper_bound: upper,
                holds: risks[t + 1] <= upper + DESCENT_TOLERANCE,
            }
        })
        .collect();
    let descent_holds = descent.iter().all(|d| d.holds);
    Ok(BoundReport {
        smoothness,
        learning_rate,
        step_size_ok: eta * smoothness <= 1.0,
        epochs,
        initial_risk: risks[0],
        min_grad_norm_sq,
        kappa,
        delta,
        gradient_bound: b,
        optimization_term,
        smoothness_term,
        alignment_term,
        bound,
        slack: bound - min_grad_norm_sq,
        bound_holds: min_grad_norm_sq <= bound,
        descent,
        descent_holds,
    })
}

/// Settings for [`check_coreset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRunConfig {
    pub epochs: usize,
    /// Step size of the pilot run used to estimate smoothness.
    pub pilot_learning_rate: f64,
    /// The checked run uses `eta = step_fraction / L`.
    pub step_fraction: f64,
}

impl Default for TheoryRunConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            pilot_learning_rate: 0.05,
            step_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub pilot_smoothness: f64,
    pub alignment: AlignmentReport,
    pub bound: BoundReport,
}

impl TheoryCheck {
    pub fn all_hold(&self) -> bool {
        self.alignment.lemma_holds() && self.bound.descent_holds && self.bound.bound_holds && self.bound.slack > 0.0
    }
}

/// Full-batch coreset training with `eta = step_fraction / L`, where `L` comes
/// from a pilot run, followed by all checks. The smoothness used in the checks
/// is the larger of the pilot and the final-run estimates.
pub fn check_coreset(data: &Dataset, coreset: &[u64], cfg: &TheoryRunConfig) -> Result<TheoryCheck> {
    let base = TrainConfig {
        learning_rate: cfg.pilot_learning_rate,
        epochs: cfg.epochs,
        batch_size: 0,
        seed: 0,
        record_parameter_snapshots: true,
        init: Init::Zero,
    };
    let pilot = trainer::train_and_log(data, &base, Some(coreset))?;
    let pilot_l = run_smoothness(pilot.snapshots.as_deref().unwrap_or_default(), coreset, data)?;
    let eta = cfg.step_fraction / pilot_l;
    let run = trainer::train_and_log(
        data,
        &TrainConfig {
            learning_rate: eta,
            ..base
        },
        Some(coreset),
    )?;
    let run_l = run_smoothness(run.snapshots.as_deref().unwrap_or_default(), coreset, data)?;
    let l_hat = pilot_l.max(run_l);
    let alignment = alignment_diagnostics(&run, coreset, data)?;
    let bound = theorem1_check(&run, coreset, data, l_hat, eta)?;
    Ok(TheoryCheck {
        pilot_smoothness: pilot_l,
        alignment,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{generate_dataset, SyntheticSpec};

    fn data() -> Dataset {
        generate_dataset(&SyntheticSpec {
            num_classes: 3,
            input_dim: 4,
            class_means: SyntheticSpec::random_means(3, 4, 1.5, 5),
            noise_scale: 1.0,
            n_train: 60,
            n_val: 30,
            n_query: 6,
            n_reference: 600,
            label_noise_fraction: 0.1,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn quadratic_fixture_recovers_curvature() {
        let lambda = 3.25;
        let points: Vec<Vec<f64>> = (0..6).map(|t| vec![1.0 / (t as f64 + 1.0), -0.5 * t as f64, 2.0]).collect();
        let l = smoothness_estimate(&points, |p| p.iter().map(|v| lambda * v).collect()).unwrap();
        assert!((l / 2.0 - lambda).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_are_an_error() {
        let points = vec![vec![1.0, 2.0]; 3];
        assert!(matches!(
            smoothness_estimate(&points, |p| p.to_vec()),
            Err(TheoryError::AllStepsZero)
        ));
        assert!(matches!(
            smoothness_estimate(&points[..1], |p| p.to_vec()),
            Err(TheoryError::TooFewSnapshots)
        ));
    }

    #[test]
    fn missing_snapshots() {
        let d = data();
        let r = trainer::train_and_log(&d, &TrainConfig { epochs: 2, ..TrainConfig::default() }, None).unwrap();
        assert!(matches!(
            alignment_diagnostics(&r, &[0, 1], &d),
            Err(TheoryError::MissingSnapshots)
        ));
    }

    #[test]
    fn singleton_coreset_kappa_is_one_minus_its_cosine() {
        let d = data();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.1,
            record_parameter_snapshots: true,
            ..TrainConfig::default()
        };
        let r = trainer::train_and_log(&d, &cfg, Some(&[7])).unwrap();
        let rep = alignment_diagnostics(&r, &[7], &d).unwrap();
        for c in &rep.checkpoints {
            assert_eq!(c.cosines.len(), 1);
            assert_eq!(c.kappa, 1.0 - c.cosines[0]);
        }
    }

    #[test]
    fn full_coreset_with_validation_equal_to_train() {
        let mut d = data();
        d.validation = d.train.clone();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.1,
            record_parameter_snapshots: true,
            ..TrainConfig::default()
        };
        let r = trainer::train_and_log(&d, &cfg, None).unwrap();
        let rep = alignment_diagnostics(&r, &d.train.ids, &d).unwrap();
        for c in &rep.checkpoints {
            assert!((c.subset_gap - c.validation_gap).abs() < 1e-12);
        }
    }

    #[test]
    fn single_epoch_bound() {
        let d = data();
        let ids: Vec<u64> = (0..20).collect();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.01,
            record_parameter_snapshots: true,
            ..TrainConfig::default()
        };
        let r = trainer::train_and_log(&d, &cfg, Some(&ids)).unwrap();
        let l = run_smoothness(r.snapshots.as_ref().unwrap(), &ids, &d).unwrap();
        let rep = theorem1_check(&r, &ids, &d, l, 0.01).unwrap();
        assert_eq!(rep.epochs, 1);
        assert!((rep.optimization_term - 2.0 * rep.initial_risk / 0.01).abs() < 1e-9);
        assert!(rep.bound_holds);
        assert!(rep.slack > 0.0);
    }
}
