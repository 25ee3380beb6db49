//! Per-sample loss trajectories and their on-disk format.
//!
//! A loss log is a dense `M × (T+1)` matrix of losses for one split, recorded
//! at the checkpoints of a [`CheckpointGrid`] whose first entry is the model
//! at initialization. On disk a run is a directory holding `manifest.json`
//! plus one CSV per split with header `sample_id,label,loss_<epoch>,...`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numfmt::sig17;
use crate::scoring::DeltaMatrix;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum LossLogError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: row has {found} loss values, expected {expected}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite loss for sample {sample_id} at checkpoint {checkpoint}")]
    NonFiniteLoss { sample_id: u64, checkpoint: u64 },
    #[error("negative loss for sample {sample_id} at checkpoint {checkpoint}")]
    NegativeLoss { sample_id: u64, checkpoint: u64 },
    #[error("duplicate sample id {0}")]
    DuplicateSampleId(u64),
    #[error("checkpoint grids differ: train {train} vs validation {validation}")]
    GridMismatch {
        train: CheckpointGrid,
        validation: CheckpointGrid,
    },
    #[error("invalid checkpoint grid: {0}")]
    InvalidGrid(String),
    #[error("inconsistent log shape: {0}")]
    Shape(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("subsampled grid would keep fewer than 2 checkpoints")]
    EmptyGrid,
    #[error("checkpoint {0} is not on the grid")]
    UnknownIndex(u64),
}

pub type Result<T, E = LossLogError> = std::result::Result<T, E>;

/// Ordered checkpoint ids (epochs). Always starts at 0 and has at least two
/// entries so that one loss difference exists.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct CheckpointGrid(Vec<u64>);

impl CheckpointGrid {
    pub fn new(indices: Vec<u64>) -> Result<Self> {
        if indices.len() < 2 {
            return Err(LossLogError::InvalidGrid(format!(
                "need at least 2 checkpoints, got {}",
                indices.len()
            )));
        }
        if indices[0] != 0 {
            return Err(LossLogError::InvalidGrid(format!(
                "first checkpoint must be 0, got {}",
                indices[0]
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LossLogError::InvalidGrid(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        Ok(Self(indices))
    }

    /// The grid `0, 1, ..., epochs`.
    pub fn dense(epochs: u64) -> Result<Self> {
        Self::new((0..=epochs).collect())
    }

    pub fn indices(&self) -> &[u64] {
        &self.0
    }

    /// Number of checkpoints, `T + 1`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of loss differences, `T`.
    pub fn num_differences(&self) -> usize {
        self.0.len() - 1
    }
}

impl TryFrom<Vec<u64>> for CheckpointGrid {
    type Error = LossLogError;
    fn try_from(v: Vec<u64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CheckpointGrid> for Vec<u64> {
    fn from(g: CheckpointGrid) -> Self {
        g.0
    }
}

impl fmt::Display for CheckpointGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

/// Per-sample losses of one split across a checkpoint grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLog {
    split: Split,
    sample_ids: Vec<u64>,
    labels: Vec<usize>,
    grid: CheckpointGrid,
    losses: Vec<Vec<f64>>,
}

impl LossLog {
    pub fn new(
        split: Split,
        sample_ids: Vec<u64>,
        labels: Vec<usize>,
        grid: CheckpointGrid,
        losses: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if sample_ids.len() != labels.len() || sample_ids.len() != losses.len() {
            return Err(LossLogError::Shape(format!(
                "{} ids, {} labels, {} loss rows",
                sample_ids.len(),
                labels.len(),
                losses.len()
            )));
        }
        let mut seen = HashSet::with_capacity(sample_ids.len());
        for &id in &sample_ids {
            if !seen.insert(id) {
                return Err(LossLogError::DuplicateSampleId(id));
            }
        }
        for (row, &id) in losses.iter().zip(&sample_ids) {
            if row.len() != grid.len() {
                return Err(LossLogError::Shape(format!(
                    "sample {id} has {} losses for a grid of {}",
                    row.len(),
                    grid.len()
                )));
            }
            for (&v, &c) in row.iter().zip(grid.indices()) {
                if !v.is_finite() {
                    return Err(LossLogError::NonFiniteLoss {
                        sample_id: id,
                        checkpoint: c,
                    });
                }
                if v < 0.0 {
                    return Err(LossLogError::NegativeLoss {
                        sample_id: id,
                        checkpoint: c,
                    });
                }
            }
        }
        Ok(Self {
            split,
            sample_ids,
            labels,
            grid,
            losses,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn grid(&self) -> &CheckpointGrid {
        &self.grid
    }

    pub fn losses(&self) -> &[Vec<f64>] {
        &self.losses
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Distinct labels present in the log.
    pub fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Keeps only the rows whose sample id is in `ids`, preserving log order.
    pub fn select_rows(&self, ids: &BTreeSet<u64>) -> LossLog {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| ids.contains(&self.sample_ids[i]))
            .collect();
        LossLog {
            split: self.split,
            sample_ids: keep.iter().map(|&i| self.sample_ids[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            grid: self.grid.clone(),
            losses: keep.iter().map(|&i| self.losses[i].clone()).collect(),
        }
    }

    /// Writes the canonical CSV representation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source| LossLogError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let mut header = vec!["sample_id".to_string(), "label".to_string()];
        header.extend(self.grid.indices().iter().map(|c| format!("loss_{c}")));
        out.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..self.len() {
            let mut rec = vec![self.sample_ids[i].to_string(), self.labels[i].to_string()];
            rec.extend(self.losses[i].iter().map(|&v| sig17(v)));
            out.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        out.flush().map_err(io_err)
    }

    /// Reads a loss CSV. The checkpoint grid is taken from the header.
    pub fn read_csv(path: &Path, split: Split) -> Result<Self> {
        if !path.exists() {
            return Err(LossLogError::MissingFile(path.to_path_buf()));
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        let parse_err = |line: usize, message: String| LossLogError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if header.len() < 2 || &header[0] != "sample_id" || &header[1] != "label" {
            return Err(parse_err(
                1,
                "header must start with sample_id,label".into(),
            ));
        }
        let mut grid = Vec::with_capacity(header.len() - 2);
        for name in header.iter().skip(2) {
            let c = name
                .strip_prefix("loss_")
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| parse_err(1, format!("bad loss column name {name:?}")))?;
            grid.push(c);
        }
        let grid = CheckpointGrid::new(grid)?;

        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut losses = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let line = n + 2;
            let rec = rec.map_err(|e| csv_err(path, e))?;
            if rec.len() != grid.len() + 2 {
                return Err(LossLogError::MalformedRow {
                    path: path.to_path_buf(),
                    line,
                    expected: grid.len(),
                    found: rec.len().saturating_sub(2),
                });
            }
            let id: u64 = rec[0]
                .parse()
                .map_err(|_| parse_err(line, format!("bad sample id {:?}", &rec[0])))?;
            let label: usize = rec[1]
                .parse()
                .map_err(|_| parse_err(line, format!("bad label {:?}", &rec[1])))?;
            let row = rec
                .iter()
                .skip(2)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| parse_err(line, format!("bad loss value {s:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            ids.push(id);
            labels.push(label);
            losses.push(row);
        }
        LossLog::new(split, ids, labels, grid, losses)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> LossLogError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => LossLogError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => LossLogError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointUnit {
    Epoch,
}

/// Describes a loss-log directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub dataset_name: String,
    pub num_classes: usize,
    pub seed: u64,
    pub checkpoint_unit: CheckpointUnit,
    pub files: BTreeMap<Split, String>,
}

impl Manifest {
    pub fn new(dataset_name: impl Into<String>, num_classes: usize, seed: u64) -> Self {
        let files = BTreeMap::from([
            (Split::Train, "train.csv".to_string()),
            (Split::Validation, "validation.csv".to_string()),
        ]);
        Self {
            version: FORMAT_VERSION.into(),
            dataset_name: dataset_name.into(),
            num_classes,
            seed,
            checkpoint_unit: CheckpointUnit::Epoch,
            files,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| LossLogError::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|source| LossLogError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LossLogError::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|source| LossLogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| LossLogError::Manifest(e.to_string()))
    }
}

/// Loads and validates a manifest and both split logs it references.
/// `manifest_path` may point at the manifest file or at its directory.
pub fn load_losslog(manifest_path: &Path) -> Result<(Manifest, LossLog, LossLog)> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join("manifest.json")
    } else {
        manifest_path.to_path_buf()
    };
    let manifest = Manifest::read(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let file_for = |split: Split| -> Result<PathBuf> {
        manifest
            .files
            .get(&split)
            .map(|f| base.join(f))
            .ok_or_else(|| LossLogError::Manifest(format!("no file listed for split {split}")))
    };
    let train = LossLog::read_csv(&file_for(Split::Train)?, Split::Train)?;
    let validation = LossLog::read_csv(&file_for(Split::Validation)?, Split::Validation)?;
    if train.grid() != validation.grid() {
        return Err(LossLogError::GridMismatch {
            train: train.grid().clone(),
            validation: validation.grid().clone(),
        });
    }
    let classes: BTreeSet<usize> = train.classes().union(&validation.classes()).copied().collect();
    if classes.len() != manifest.num_classes {
        return Err(LossLogError::Manifest(format!(
            "num_classes is {} but logs contain {} distinct labels",
            manifest.num_classes,
            classes.len()
        )));
    }
    if let Some(&max) = classes.iter().next_back() {
        if max >= manifest.num_classes {
            return Err(LossLogError::Manifest(format!(
                "labels must be contiguous in 0..{}, found {max}",
                manifest.num_classes
            )));
        }
    }
    Ok((manifest, train, validation))
}

/// Writes `manifest.json`, `train.csv` and `validation.csv` into `dir`.
pub fn write_losslog(dir: &Path, manifest: &Manifest, train: &LossLog, validation: &LossLog) -> Result<()> {
    if train.grid() != validation.grid() {
        return Err(LossLogError::GridMismatch {
            train: train.grid().clone(),
            validation: validation.grid().clone(),
        });
    }
    fs::create_dir_all(dir).map_err(|source| LossLogError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let file = |split: Split| {
        manifest
            .files
            .get(&split)
            .cloned()
            .ok_or_else(|| LossLogError::Manifest(format!("no file listed for split {split}")))
    };
    train.write_csv(&dir.join(file(Split::Train)?))?;
    validation.write_csv(&dir.join(file(Split::Validation)?))?;
    manifest.write(&dir.join("manifest.json"))
}

/// Which checkpoints to keep when thinning a trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsamplePlan {
    /// The first `n` checkpoints of the grid.
    Prefix(usize),
    /// Every `s`-th checkpoint by grid position, starting with the first.
    Stride(usize),
    /// Exactly these checkpoint ids; must include the initial checkpoint.
    Explicit(Vec<u64>),
}

impl std::str::FromStr for SubsamplePlan {
    type Err = String;

    /// Parses `prefix=N`, `stride=S` or `explicit=0,2,5`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, value) = s
            .split_once('=')
            .ok_or_else(|| format!("expected KIND=VALUE, got {s:?}"))?;
        let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        match kind.trim() {
            "prefix" => Ok(SubsamplePlan::Prefix(num(value)?)),
            "stride" => Ok(SubsamplePlan::Stride(num(value)?)),
            "explicit" => value
                .split(',')
                .map(|v| v.trim().parse::<u64>().map_err(|e| format!("{v:?}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(SubsamplePlan::Explicit),
            other => Err(format!("unknown subsample plan {other:?}")),
        }
    }
}

/// Returns a copy of `log` keeping only the checkpoint columns selected by `plan`.
pub fn subsample_checkpoints(log: &LossLog, plan: &SubsamplePlan) -> Result<LossLog> {
    let grid = log.grid().indices();
    let positions: Vec<usize> = match plan {
        SubsamplePlan::Prefix(n) => (0..(*n).min(grid.len())).collect(),
        SubsamplePlan::Stride(0) => return Err(LossLogError::EmptyGrid),
        SubsamplePlan::Stride(s) => (0..grid.len()).step_by(*s).collect(),
        SubsamplePlan::Explicit(wanted) => {
            let wanted: BTreeSet<u64> = wanted.iter().copied().collect();
            let mut pos = Vec::with_capacity(wanted.len());
            for &c in &wanted {
                match grid.binary_search(&c) {
                    Ok(p) => pos.push(p),
                    Err(_) => return Err(LossLogError::UnknownIndex(c)),
                }
            }
            if pos.first() != Some(&0) {
                return Err(LossLogError::InvalidGrid(
                    "explicit checkpoints must include the initial checkpoint".into(),
                ));
            }
            pos
        }
    };
    if positions.len() < 2 {
        return Err(LossLogError::EmptyGrid);
    }
    let new_grid = CheckpointGrid::new(positions.iter().map(|&p| grid[p]).collect())?;
    let losses = log
        .losses()
        .iter()
        .map(|row| positions.iter().map(|&p| row[p]).collect())
        .collect();
    Ok(LossLog {
        split: log.split,
        sample_ids: log.sample_ids.clone(),
        labels: log.labels.clone(),
        grid: new_grid,
        losses,
    })
}

/// Consecutive-checkpoint loss differences `loss[t] - loss[t-1]` for every row.
pub fn delta_trajectories(log: &LossLog) -> DeltaMatrix {
    let deltas = log
        .losses()
        .iter()
        .map(|row| row.windows(2).map(|w| w[1] - w[0]).collect())
        .collect();
    DeltaMatrix::new(log.sample_ids().to_vec(), log.labels().to_vec(), deltas)
        .expect("loss logs always yield a well-formed delta matrix")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(split: Split, rows: Vec<Vec<f64>>) -> LossLog {
        let n = rows.len();
        let t = rows[0].len() as u64;
        LossLog::new(
            split,
            (0..n as u64).collect(),
            (0..n).map(|i| i % 2).collect(),
            CheckpointGrid::dense(t - 1).unwrap(),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn grid_invariants() {
        assert!(CheckpointGrid::new(vec![0]).is_err());
        assert!(CheckpointGrid::new(vec![1, 2]).is_err());
        assert!(CheckpointGrid::new(vec![0, 2, 2]).is_err());
        let g = CheckpointGrid::new(vec![0, 1, 3]).unwrap();
        assert_eq!(g.num_differences(), 2);
        assert_eq!(g.to_string(), "(0,1,3)");
    }

    #[test]
    fn constructor_rejects_bad_rows() {
        let grid = CheckpointGrid::dense(2).unwrap();
        let err = LossLog::new(
            Split::Train,
            vec![4, 9],
            vec![0, 1],
            grid.clone(),
            vec![vec![1.0, 0.5, 0.2], vec![1.0, f64::NAN, 0.1]],
        )
        .unwrap_err();
        assert!(matches!(err, LossLogError::NonFiniteLoss { sample_id: 9, checkpoint: 1 }));
        let err = LossLog::new(
            Split::Train,
            vec![4, 4],
            vec![0, 1],
            grid,
            vec![vec![1.0, 0.5, 0.2], vec![1.0, 0.5, 0.1]],
        )
        .unwrap_err();
        assert!(matches!(err, LossLogError::DuplicateSampleId(4)));
    }

    #[test]
    fn deltas_of_simple_rows() {
        let l = log(Split::Train, vec![vec![3.0, 2.0, 1.5], vec![0.7, 0.7, 0.7]]);
        let d = delta_trajectories(&l);
        assert_eq!(d.deltas()[0], vec![-1.0, -0.5]);
        assert_eq!(d.deltas()[1], vec![0.0, 0.0]);
        assert_eq!(d.num_steps(), 2);
    }

    #[test]
    fn stride_and_prefix_on_ninety_epochs() {
        let row: Vec<f64> = (0..=90).map(|t| 1.0 / (1.0 + t as f64)).collect();
        let l = log(Split::Train, vec![row.clone(), row]);
        let s = subsample_checkpoints(&l, &SubsamplePlan::Stride(2)).unwrap();
        assert_eq!(s.grid().len(), 46);
        assert_eq!(s.grid().indices()[45], 90);
        assert_eq!(delta_trajectories(&s).num_steps(), 45);
        let p = subsample_checkpoints(&l, &SubsamplePlan::Prefix(46)).unwrap();
        assert_eq!(p.grid().indices(), (0..=45).collect::<Vec<u64>>().as_slice());
        assert_eq!(l.grid().len(), 91, "input untouched");
    }

    #[test]
    fn subsample_errors() {
        let l = log(Split::Train, vec![vec![1.0, 0.5]]);
        assert!(matches!(
            subsample_checkpoints(&l, &SubsamplePlan::Stride(3)),
            Err(LossLogError::EmptyGrid)
        ));
        assert!(matches!(
            subsample_checkpoints(&l, &SubsamplePlan::Prefix(1)),
            Err(LossLogError::EmptyGrid)
        ));
        let l = log(Split::Train, vec![vec![1.0, 0.5, 0.4, 0.3]]);
        assert!(matches!(
            subsample_checkpoints(&l, &SubsamplePlan::Explicit(vec![0, 7])),
            Err(LossLogError::UnknownIndex(7))
        ));
        assert!(subsample_checkpoints(&l, &SubsamplePlan::Explicit(vec![1, 2])).is_err());
        let e = subsample_checkpoints(&l, &SubsamplePlan::Explicit(vec![3, 0])).unwrap();
        assert_eq!(e.grid().indices(), &[0, 3]);
        assert_eq!(e.losses()[0], vec![1.0, 0.3]);
    }

    #[test]
    fn plan_parsing() {
        assert_eq!("stride=2".parse::<SubsamplePlan>().unwrap(), SubsamplePlan::Stride(2));
        assert_eq!("prefix=46".parse::<SubsamplePlan>().unwrap(), SubsamplePlan::Prefix(46));
        assert_eq!(
            "explicit=0,3,5".parse::<SubsamplePlan>().unwrap(),
            SubsamplePlan::Explicit(vec![0, 3, 5])
        );
        assert!("every=2".parse::<SubsamplePlan>().is_err());
    }
}
