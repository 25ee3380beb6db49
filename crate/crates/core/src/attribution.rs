//! Attribution studies for pairwise loss-difference correlations: linear
//! datamodeling score (LDS) over random training subsets, and prediction
//! brittleness after removing the most attributed training samples.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{cld_infl, InfluenceMatrix, ScoringError};
use crate::selection::sample_without_replacement;
use crate::trainer::{self, split_deltas, Dataset, Init, ModelParams, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("vector has fewer than 2 distinct values")]
    ConstantVector,
    #[error("unknown training sample id {0}")]
    UnknownId(u64),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

pub type Result<T, E = AttributionError> = std::result::Result<T, E>;

/// Ranks starting at 1, ties sharing the mean of their positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn distinct_at_least_two(x: &[f64]) -> bool {
    x.iter().any(|&v| v != x[0])
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(AttributionError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AttributionError::TooShort(x.len()));
    }
    if !distinct_at_least_two(x) || !distinct_at_least_two(y) {
        return Err(AttributionError::ConstantVector);
    }
    let (rx, ry) = (fractional_ranks(x), fractional_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Sum of query column `query` over the rows of `subset`.
pub fn group_attribution(scores: &InfluenceMatrix, query: usize, subset: &[u64]) -> Result<f64> {
    let index = scores.train_index();
    group_attribution_indexed(scores, &index, query, subset)
}

fn group_attribution_indexed(
    scores: &InfluenceMatrix,
    index: &HashMap<u64, usize>,
    query: usize,
    subset: &[u64],
) -> Result<f64> {
    subset.iter().try_fold(0.0, |acc, id| {
        let row = index.get(id).ok_or(AttributionError::UnknownId(*id))?;
        Ok(acc + scores.values[*row][query])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub num_subsets: usize,
    pub alpha: f64,
    pub retrain_seeds: Vec<u64>,
    pub base_seed: u64,
}

impl SubsetPlan {
    pub fn new(num_subsets: usize, alpha: f64, retrains: usize, base_seed: u64) -> Self {
        Self {
            num_subsets,
            alpha,
            retrain_seeds: (0..retrains as u64).map(|r| base_seed.wrapping_mul(1000).wrapping_add(r + 1)).collect(),
            base_seed,
        }
    }

    pub fn subset_size(&self, n: usize) -> usize {
        (self.alpha * n as f64).ceil() as usize
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AttributionError::InvalidPlan(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.num_subsets < 2 {
            return Err(AttributionError::InvalidPlan("need at least 2 subsets".into()));
        }
        if self.retrain_seeds.is_empty() {
            return Err(AttributionError::InvalidPlan("need at least 1 retrain seed".into()));
        }
        let size = self.subset_size(n);
        if size < 1 || size > n {
            return Err(AttributionError::InvalidPlan(format!("subset size {size} for {n} samples")));
        }
        Ok(())
    }

    /// Uniform random subsets of the training ids, each sorted ascending.
    pub fn draw_subsets(&self, train_ids: &[u64]) -> Vec<Vec<u64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(11);
        let size = self.subset_size(train_ids.len());
        (0..self.num_subsets)
            .map(|_| {
                let mut s = sample_without_replacement(&mut rng, train_ids, size);
                s.sort_unstable();
                s
            })
            .collect()
    }
}

impl Default for SubsetPlan {
    fn default() -> Self {
        Self::new(20, 0.5, 3, 0)
    }
}

/// Retraining settings used by the harness: small Gaussian init and seeded
/// mini-batches so that retrains differ across seeds.
pub fn default_retrain_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.5,
        epochs: 20,
        batch_size: 100,
        seed: 0,
        record_parameter_snapshots: false,
        init: Init::Gaussian { scale: 0.01 },
    }
}

fn correct_class_probabilities(params: &ModelParams, data: &Dataset) -> Vec<f64> {
    (0..data.query.len())
        .map(|q| {
            let (x, y) = data.query.sample(q);
            params.probabilities(x)[y]
        })
        .collect()
}

/// Observed query outcomes per subset, averaged over retrain seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStudy {
    pub subsets: Vec<Vec<u64>>,
    /// `outcomes[j][q]`: mean correct-class probability of query `q` after
    /// training on subset `j`.
    pub outcomes: Vec<Vec<f64>>,
}

pub fn run_subset_study(data: &Dataset, plan: &SubsetPlan, config: &TrainConfig) -> Result<SubsetStudy> {
    plan.validate(data.train.len())?;
    let subsets = plan.draw_subsets(&data.train.ids);
    let jobs: Vec<(usize, u64)> = (0..subsets.len())
        .flat_map(|j| plan.retrain_seeds.iter().map(move |&s| (j, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(j, seed)| {
            let cfg = TrainConfig {
                seed,
                record_parameter_snapshots: false,
                ..config.clone()
            };
            let r = trainer::train_and_log(data, &cfg, Some(&subsets[j]))?;
            Ok(correct_class_probabilities(&r.params, data))
        })
        .collect::<Result<Vec<_>>>()?;
    let r = plan.retrain_seeds.len();
    let outcomes = runs
        .chunks(r)
        .map(|chunk| {
            (0..data.query.len())
                .map(|q| chunk.iter().map(|v| v[q]).sum::<f64>() / r as f64)
                .collect()
        })
        .collect();
    Ok(SubsetStudy { subsets, outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLds {
    pub query_id: u64,
    /// `None` when either vector has fewer than 2 distinct values.
    pub lds: Option<f64>,
    pub outcomes: Vec<f64>,
    pub group_scores: Vec<f64>,
    pub outcome_ranks: Vec<f64>,
    pub score_ranks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsReport {
    pub per_query: Vec<QueryLds>,
    /// Mean over queries with a defined LDS.
    pub mean_lds: Option<f64>,
    pub num_defined: usize,
}

/// LDS per query from outcomes and group scores, both indexed `[subset][query]`.
pub fn lds_report(query_ids: &[u64], outcomes: &[Vec<f64>], group_scores: &[Vec<f64>]) -> Result<LdsReport> {
    if outcomes.len() != group_scores.len() {
        return Err(AttributionError::LengthMismatch(outcomes.len(), group_scores.len()));
    }
    let per_query = query_ids
        .iter()
        .enumerate()
        .map(|(q, &query_id)| {
            let o: Vec<f64> = outcomes.iter().map(|row| row[q]).collect();
            let g: Vec<f64> = group_scores.iter().map(|row| row[q]).collect();
            let lds = match spearman(&o, &g) {
                Ok(v) => Some(v),
                Err(AttributionError::ConstantVector) => None,
                Err(e) => return Err(e),
            };
            Ok(QueryLds {
                query_id,
                lds,
                outcome_ranks: fractional_ranks(&o),
                score_ranks: fractional_ranks(&g),
                outcomes: o,
                group_scores: g,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = per_query.iter().filter_map(|q| q.lds).collect();
    Ok(LdsReport {
        mean_lds: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        num_defined: defined.len(),
        per_query,
    })
}

/// Group scores `[subset][query]` of `scores` over the study's subsets.
pub fn group_scores(scores: &InfluenceMatrix, subsets: &[Vec<u64>]) -> Result<Vec<Vec<f64>>> {
    let index = scores.train_index();
    subsets
        .iter()
        .map(|s| {
            (0..scores.query_ids.len())
                .map(|q| group_attribution_indexed(scores, &index, q, s))
                .collect()
        })
        .collect()
}

/// Pairwise influence scores from one full-data run with parameter snapshots.
pub fn full_data_influence(data: &Dataset, config: &TrainConfig) -> Result<InfluenceMatrix> {
    let cfg = TrainConfig {
        record_parameter_snapshots: true,
        ..config.clone()
    };
    let run = trainer::train_and_log(data, &cfg, None)?;
    let snaps = run.snapshots.expect("snapshots requested");
    let train = split_deltas(&snaps, &data.train);
    let query = split_deltas(&snaps, &data.query);
    Ok(cld_infl(&train, &query)?)
}

/// LDS of pairwise loss-difference correlations computed from a full-data
/// run under `score_config`, against subset retrains under `retrain_config`.
pub fn lds_evaluate(
    data: &Dataset,
    plan: &SubsetPlan,
    score_config: &TrainConfig,
    retrain_config: &TrainConfig,
) -> Result<LdsReport> {
    let scores = full_data_influence(data, score_config)?;
    let study = run_subset_study(data, plan, retrain_config)?;
    let groups = group_scores(&scores, &study.subsets)?;
    lds_report(&scores.query_ids, &study.outcomes, &groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalPolicy {
    /// Per query, remove the `k` training samples with the largest score.
    CldTopk,
    /// Remove `k` uniformly random training samples.
    Random,
}

impl std::str::FromStr for RemovalPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cld_topk" | "cld-topk" => Ok(Self::CldTopk),
            "random" => Ok(Self::Random),
            _ => Err(format!("unknown removal policy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrittlenessRow {
    pub policy: RemovalPolicy,
    pub k: usize,
    /// Flip fraction for each seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean_flip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrittlenessReport {
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<BrittlenessRow>,
}

impl BrittlenessReport {
    pub fn mean(&self, policy: RemovalPolicy, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.k == k)
            .map(|r| r.mean_flip_fraction)
    }
}

/// The `k` training ids with the largest score for query `q`; ties by id.
fn top_attributed(scores: &InfluenceMatrix, q: usize, k: usize) -> BTreeSet<u64> {
    let mut rows: Vec<(f64, u64)> = scores.values.iter().zip(&scores.train_ids).map(|(v, &id)| (v[q], id)).collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    rows.into_iter().take(k).map(|(_, id)| id).collect()
}

/// Fraction of query predictions that change relative to a full-data model
/// trained with `config.seed`, after removing `k` training samples and
/// retraining with each seed.
pub fn brittleness(
    data: &Dataset,
    scores: &InfluenceMatrix,
    ks: &[usize],
    policies: &[RemovalPolicy],
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<BrittlenessReport> {
    let n = data.train.len();
    if let Some(&k) = ks.iter().find(|&&k| k >= n) {
        return Err(AttributionError::InvalidPlan(format!("k = {k} must be below N = {n}")));
    }
    if seeds.is_empty() {
        return Err(AttributionError::InvalidPlan("need at least 1 seed".into()));
    }
    let cfg = TrainConfig {
        record_parameter_snapshots: false,
        ..config.clone()
    };
    let baseline = trainer::train_and_log(data, &cfg, None)?.params;
    let base_pred: Vec<usize> = (0..data.query.len())
        .map(|q| baseline.predict(data.query.sample(q).0))
        .collect();
    let all: Vec<u64> = data.train.ids.clone();
    let retrain_without = |removed: &BTreeSet<u64>, seed: u64| -> Result<ModelParams> {
        let keep: Vec<u64> = all.iter().copied().filter(|id| !removed.contains(id)).collect();
        let c = TrainConfig { seed, ..cfg.clone() };
        Ok(trainer::train_and_log(data, &c, Some(&keep))?.params)
    };

    let mut rows = Vec::new();
    for &policy in policies {
        for &k in ks {
            let per_seed = seeds
                .par_iter()
                .map(|&seed| -> Result<f64> {
                    let flips = match policy {
                        RemovalPolicy::Random => {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            rng.set_stream(13);
                            let removed: BTreeSet<u64> =
                                sample_without_replacement(&mut rng, &all, k).into_iter().collect();
                            let p = retrain_without(&removed, seed)?;
                            (0..data.query.len())
                                .filter(|&q| p.predict(data.query.sample(q).0) != base_pred[q])
                                .count()
                        }
                        RemovalPolicy::CldTopk => (0..data.query.len())
                            .into_par_iter()
                            .map(|q| {
                                let p = retrain_without(&top_attributed(scores, q, k), seed)?;
                                Ok(usize::from(p.predict(data.query.sample(q).0) != base_pred[q]))
                            })
                            .collect::<Result<Vec<_>>>()?
                            .into_iter()
                            .sum(),
                    };
                    Ok(flips as f64 / data.query.len().max(1) as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            rows.push(BrittlenessRow {
                policy,
                k,
                per_seed,
                mean_flip_fraction: mean,
            });
        }
    }
    Ok(BrittlenessReport {
        ks: ks.to_vec(),
        seeds: seeds.to_vec(),
        rows,
    })
}
