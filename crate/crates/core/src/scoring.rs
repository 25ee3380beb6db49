//! CLD scores: Pearson correlation between a training sample's
//! loss-difference trajectory and the mean validation trajectory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numfmt::sig17;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
    #[error("no validation samples for class {0}")]
    MissingClassValidation(usize),
    #[error("trajectory lengths differ: {0} vs {1} steps")]
    GridMismatch(usize, usize),
    #[error("score tables cover different sample ids")]
    IdMismatch,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid delta matrix: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = ScoringError> = std::result::Result<T, E>;

/// Loss-difference trajectories, one row of `T` steps per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    sample_ids: Vec<u64>,
    labels: Vec<usize>,
    deltas: Vec<Vec<f64>>,
    steps: usize,
}

impl DeltaMatrix {
    pub fn new(sample_ids: Vec<u64>, labels: Vec<usize>, deltas: Vec<Vec<f64>>) -> Result<Self> {
        if sample_ids.len() != labels.len() || sample_ids.len() != deltas.len() {
            return Err(ScoringError::Invalid("ids, labels and rows differ in length".into()));
        }
        let steps = deltas.first().map_or(0, Vec::len);
        if !deltas.is_empty() && steps == 0 {
            return Err(ScoringError::Invalid("trajectories need at least one step".into()));
        }
        if deltas.iter().any(|r| r.len() != steps) {
            return Err(ScoringError::Invalid("ragged trajectory rows".into()));
        }
        if deltas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ScoringError::Invalid("non-finite loss difference".into()));
        }
        Ok(Self {
            sample_ids,
            labels,
            deltas,
            steps,
        })
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn deltas(&self) -> &[Vec<f64>] {
        &self.deltas
    }

    /// Trajectory length `T`.
    pub fn num_steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Outcome of a correlation: a value, or undefined because one input is constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Value(f64),
    Degenerate,
}

impl Correlation {
    /// The value, with degenerate correlations mapped to 0.
    pub fn or_zero(self) -> f64 {
        match self {
            Correlation::Value(v) => v,
            Correlation::Degenerate => 0.0,
        }
    }

    pub fn is_degenerate(self) -> bool {
        matches!(self, Correlation::Degenerate)
    }
}

/// Pearson correlation before clamping to `[-1, 1]`.
pub fn pearson_raw(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(ScoringError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(ScoringError::TooShort(x.len()));
    }
    if is_constant(x) || is_constant(y) {
        return Ok(Correlation::Degenerate);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::Degenerate);
    }
    Ok(Correlation::Value(sxy / (sxx * syy).sqrt()))
}

/// Pearson correlation with population normalization, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    Ok(match pearson_raw(x, y)? {
        // `+ 0.0` folds a negative zero into positive zero.
        Correlation::Value(r) => Correlation::Value(r.clamp(-1.0, 1.0) + 0.0),
        Correlation::Degenerate => Correlation::Degenerate,
    })
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

/// Mean validation trajectory per class, plus the class-agnostic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassValidationTrajectory {
    pub per_class: BTreeMap<usize, Vec<f64>>,
    pub counts: BTreeMap<usize, usize>,
    pub global: Vec<f64>,
}

pub fn validation_class_average(val_deltas: &DeltaMatrix) -> Result<ClassValidationTrajectory> {
    if val_deltas.is_empty() {
        return Err(ScoringError::Empty("validation deltas"));
    }
    let t = val_deltas.num_steps();
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut global = vec![0.0; t];
    for (row, &c) in val_deltas.deltas().iter().zip(val_deltas.labels()) {
        let acc = sums.entry(c).or_insert_with(|| vec![0.0; t]);
        for j in 0..t {
            acc[j] += row[j];
            global[j] += row[j];
        }
        *counts.entry(c).or_default() += 1;
    }
    let per_class = sums
        .into_iter()
        .map(|(c, mut v)| {
            let n = counts[&c] as f64;
            v.iter_mut().for_each(|a| *a /= n);
            (c, v)
        })
        .collect();
    let n = val_deltas.len() as f64;
    global.iter_mut().for_each(|a| *a /= n);
    Ok(ClassValidationTrajectory {
        per_class,
        counts,
        global,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Correlate with the validation mean of the sample's own class.
    #[default]
    PerClass,
    /// Correlate with the mean over all validation samples.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: u64,
    pub label: usize,
    pub score: f64,
    pub degenerate: bool,
}

/// One CLD score per training sample, in training-log order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.score).collect()
    }

    /// Number of samples per class.
    pub fn class_sizes(&self) -> BTreeMap<usize, usize> {
        let mut sizes = BTreeMap::new();
        for r in &self.rows {
            *sizes.entry(r.label).or_default() += 1;
        }
        sizes
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: &dyn std::fmt::Display| ScoringError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| err(&e))?;
        w.write_record(["sample_id", "label", "score", "degenerate"])
            .map_err(|e| err(&e))?;
        for r in &self.rows {
            w.write_record([
                r.sample_id.to_string(),
                r.label.to_string(),
                sig17(r.score),
                r.degenerate.to_string(),
            ])
            .map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| ScoringError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| err(&e))?;
        let mut rows = Vec::new();
        for rec in r.deserialize::<ScoreRow>() {
            let row = rec.map_err(|e| err(&e))?;
            if !row.score.is_finite() {
                return Err(err(&format!("non-finite score for sample {}", row.sample_id)));
            }
            rows.push(row);
        }
        let mut seen = HashSet::new();
        if let Some(dup) = rows.iter().find(|r| !seen.insert(r.sample_id)) {
            return Err(err(&format!("duplicate sample id {}", dup.sample_id)));
        }
        Ok(Self { rows })
    }
}

/// Scores every training trajectory against the validation mean.
/// Degenerate (constant) trajectories get score 0 and a flag.
pub fn cld_scores(
    train_deltas: &DeltaMatrix,
    val_avg: &ClassValidationTrajectory,
    mode: ScoreMode,
) -> Result<ScoreTable> {
    if train_deltas.num_steps() != val_avg.global.len() && !train_deltas.is_empty() {
        return Err(ScoringError::GridMismatch(
            train_deltas.num_steps(),
            val_avg.global.len(),
        ));
    }
    if mode == ScoreMode::PerClass {
        for &c in train_deltas.labels() {
            if !val_avg.per_class.contains_key(&c) {
                return Err(ScoringError::MissingClassValidation(c));
            }
        }
    }
    let rows = (0..train_deltas.len())
        .into_par_iter()
        .map(|i| {
            let label = train_deltas.labels()[i];
            let target = match mode {
                ScoreMode::PerClass => &val_avg.per_class[&label],
                ScoreMode::Global => &val_avg.global,
            };
            let corr = pearson(&train_deltas.deltas()[i], target)?;
            Ok(ScoreRow {
                sample_id: train_deltas.sample_ids()[i],
                label,
                score: corr.or_zero(),
                degenerate: corr.is_degenerate(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable { rows })
}

/// Pairwise train-by-query correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub train_ids: Vec<u64>,
    pub query_ids: Vec<u64>,
    /// `values[m][q]` correlates train row `m` with query row `q`.
    pub values: Vec<Vec<f64>>,
}

impl InfluenceMatrix {
    pub fn train_index(&self) -> HashMap<u64, usize> {
        self.train_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    pub fn query_position(&self, query_id: u64) -> Option<usize> {
        self.query_ids.iter().position(|&q| q == query_id)
    }
}

/// `values[m][q] = pearson(train_m, query_q)`, with degenerate pairs set to 0.
pub fn cld_infl(train_deltas: &DeltaMatrix, query_deltas: &DeltaMatrix) -> Result<InfluenceMatrix> {
    if train_deltas.num_steps() != query_deltas.num_steps() {
        return Err(ScoringError::GridMismatch(
            train_deltas.num_steps(),
            query_deltas.num_steps(),
        ));
    }
    let values = train_deltas
        .deltas()
        .par_iter()
        .map(|m| {
            query_deltas
                .deltas()
                .iter()
                .map(|q| pearson(m, q).map(Correlation::or_zero))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InfluenceMatrix {
        train_ids: train_deltas.sample_ids().to_vec(),
        query_ids: query_deltas.sample_ids().to_vec(),
        values,
    })
}

/// Mean absolute score difference over samples matched by id.
pub fn score_mae(a: &ScoreTable, b: &ScoreTable) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ScoringError::IdMismatch);
    }
    if a.is_empty() {
        return Err(ScoringError::Empty("score tables"));
    }
    let by_id: HashMap<u64, f64> = b.rows.iter().map(|r| (r.sample_id, r.score)).collect();
    let mut total = 0.0;
    for r in &a.rows {
        let other = by_id.get(&r.sample_id).ok_or(ScoringError::IdMismatch)?;
        total += (r.score - other).abs();
    }
    Ok(total / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(c: Correlation) -> f64 {
        match c {
            Correlation::Value(v) => v,
            Correlation::Degenerate => panic!("unexpected degenerate"),
        }
    }

    #[test]
    fn pearson_examples() {
        assert!((value(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap()) - 1.0).abs() < 1e-15);
        assert_eq!(value(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap()), -1.0);
        assert_eq!(value(pearson(&[1.0, 0.0, 2.0], &[0.0, 1.0, 1.0]).unwrap()), 0.0);
        assert!(pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap().is_degenerate());
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0]),
            Err(ScoringError::LengthMismatch(2, 1))
        ));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(ScoringError::TooShort(1))));
    }

    #[test]
    fn constant_row_with_inexact_mean_is_degenerate() {
        // 3 * 0.1 / 3 != 0.1 in floating point; still a constant vector.
        assert!(pearson(&[0.1, 0.1, 0.1], &[1.0, 2.0, 4.0]).unwrap().is_degenerate());
    }

    fn dm(labels: Vec<usize>, rows: Vec<Vec<f64>>) -> DeltaMatrix {
        DeltaMatrix::new((0..rows.len() as u64).collect(), labels, rows).unwrap()
    }

    #[test]
    fn class_average_examples() {
        let v = dm(vec![0, 0, 1], vec![vec![1.0, 1.0], vec![3.0, 3.0], vec![-1.0, 4.0]]);
        let avg = validation_class_average(&v).unwrap();
        assert_eq!(avg.per_class[&0], vec![2.0, 2.0]);
        assert_eq!(avg.per_class[&1], vec![-1.0, 4.0]);
        assert_eq!(avg.counts[&0], 2);
        assert_eq!(avg.global, vec![1.0, 8.0 / 3.0]);
    }

    #[test]
    fn self_and_negated_scores() {
        let val = dm(vec![0, 1], vec![vec![-1.0, -0.5, -0.2], vec![0.3, -0.1, 0.0]]);
        let avg = validation_class_average(&val).unwrap();
        let train = dm(
            vec![0, 0, 1],
            vec![vec![-1.0, -0.5, -0.2], vec![1.0, 0.5, 0.2], vec![0.0, 0.0, 0.0]],
        );
        let s = cld_scores(&train, &avg, ScoreMode::PerClass).unwrap();
        assert_eq!(s.rows[0].score, 1.0);
        assert_eq!(s.rows[1].score, -1.0);
        assert!(s.rows[2].degenerate);
        assert_eq!(s.rows[2].score, 0.0);
        assert!(!s.rows[0].degenerate);
    }

    #[test]
    fn missing_class_is_an_error() {
        let val = dm(vec![0], vec![vec![-1.0, -0.5]]);
        let avg = validation_class_average(&val).unwrap();
        let train = dm(vec![1], vec![vec![-1.0, -0.5]]);
        assert!(matches!(
            cld_scores(&train, &avg, ScoreMode::PerClass),
            Err(ScoringError::MissingClassValidation(1))
        ));
        assert!(cld_scores(&train, &avg, ScoreMode::Global).is_ok());
    }

    #[test]
    fn influence_diagonal_and_degenerate_column() {
        let t = dm(vec![0, 1], vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]]);
        let m = cld_infl(&t, &t).unwrap();
        assert_eq!(m.values[0][0], 1.0);
        assert_eq!(m.values[1][1], 1.0);
        let q = dm(vec![0], vec![vec![0.2, 0.2, 0.2]]);
        let m = cld_infl(&t, &q).unwrap();
        assert!(m.values.iter().all(|r| r[0] == 0.0));
        let short = dm(vec![0], vec![vec![0.2, 0.2]]);
        assert!(matches!(cld_infl(&t, &short), Err(ScoringError::GridMismatch(3, 2))));
    }

    #[test]
    fn mae() {
        let a = ScoreTable {
            rows: (0..4)
                .map(|i| ScoreRow {
                    sample_id: i,
                    label: 0,
                    score: i as f64 / 10.0,
                    degenerate: false,
                })
                .collect(),
        };
        assert_eq!(score_mae(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.rows.reverse();
        b.rows.iter_mut().for_each(|r| r.score += 0.1);
        assert!((score_mae(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        b.rows[0].sample_id = 99;
        assert!(matches!(score_mae(&a, &b), Err(ScoringError::IdMismatch)));
    }
}
