//! Coreset construction from per-sample scores.
//!
//! The main path is [`select_topk`]: within each class keep the `k_c`
//! highest-scoring samples, with quotas from [`allocate_quotas`]. The
//! stratified [`ccs_stratified`] baseline and [`build_validation_set`] reuse
//! the same binning and budget-splitting helpers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{ScoreRow, ScoreTable};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("budget {k} exceeds the {available} available samples")]
    BudgetTooLarge { k: usize, available: usize },
    #[error("budget must select at least one sample")]
    ZeroBudget,
    #[error("invalid fraction {0}; expected 0 < p <= 1")]
    InvalidFraction(f64),
    #[error("quota {quota} for class {class} exceeds its {size} samples")]
    QuotaExceedsClass { class: usize, quota: usize, size: usize },
    #[error("requested {size} samples from a pool of {pool}")]
    SizeTooLarge { size: usize, pool: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = SelectionError> = std::result::Result<T, E>;

/// How large the coreset should be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// `k = round(p * N)`, split proportionally across classes.
    Fraction(f64),
    /// Exactly `k` samples, split proportionally across classes.
    Total(usize),
    /// Explicit per-class quotas.
    PerClass(BTreeMap<usize, usize>),
}

impl Budget {
    pub fn resolve(&self, class_sizes: &BTreeMap<usize, usize>) -> Result<BTreeMap<usize, usize>> {
        let n: usize = class_sizes.values().sum();
        match self {
            Budget::Fraction(p) => {
                if !(*p > 0.0 && *p <= 1.0) {
                    return Err(SelectionError::InvalidFraction(*p));
                }
                allocate_quotas((p * n as f64).round() as usize, class_sizes)
            }
            Budget::Total(k) => allocate_quotas(*k, class_sizes),
            Budget::PerClass(q) => {
                for (&class, &quota) in q {
                    let size = class_sizes.get(&class).copied().unwrap_or(0);
                    if quota > size {
                        return Err(SelectionError::QuotaExceedsClass { class, quota, size });
                    }
                }
                if q.values().sum::<usize>() == 0 {
                    return Err(SelectionError::ZeroBudget);
                }
                Ok(q.clone())
            }
        }
    }
}

/// Splits `k` across classes in proportion to their sizes.
///
/// Each class first gets `floor(k * n_c / N)`; the residue goes one by one to
/// the classes with the largest remainders `k * n_c mod N`, lowest class id
/// first on ties. Quotas never exceed class sizes and always sum to `k`.
pub fn allocate_quotas(k: usize, class_sizes: &BTreeMap<usize, usize>) -> Result<BTreeMap<usize, usize>> {
    let n: usize = class_sizes.values().sum();
    if k == 0 {
        return Err(SelectionError::ZeroBudget);
    }
    if k > n {
        return Err(SelectionError::BudgetTooLarge { k, available: n });
    }
    let (k128, n128) = (k as u128, n as u128);
    let mut quotas: BTreeMap<usize, usize> = BTreeMap::new();
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(class_sizes.len());
    for (&c, &size) in class_sizes {
        let prod = k128 * size as u128;
        quotas.insert(c, (prod / n128) as usize);
        remainders.push((prod % n128, c));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut residue = k - quotas.values().sum::<usize>();
    for &(_, c) in remainders.iter().cycle() {
        if residue == 0 {
            break;
        }
        if quotas[&c] < class_sizes[&c] {
            *quotas.get_mut(&c).unwrap() += 1;
            residue -= 1;
        }
    }
    // Overflow is impossible with floor + remainder, but the cap is part of
    // the contract: move any excess to the largest classes with room.
    let mut by_size: Vec<usize> = class_sizes.keys().copied().collect();
    by_size.sort_by(|a, b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(b)));
    let mut excess = 0;
    for (&c, q) in quotas.iter_mut() {
        if *q > class_sizes[&c] {
            excess += *q - class_sizes[&c];
            *q = class_sizes[&c];
        }
    }
    for &c in by_size.iter().cycle() {
        if excess == 0 {
            break;
        }
        if quotas[&c] < class_sizes[&c] {
            *quotas.get_mut(&c).unwrap() += 1;
            excess -= 1;
        }
    }
    Ok(quotas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    CldTopk,
    CcsStratified,
    Random,
}

/// Selected samples, sorted by id, with the quotas that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    /// `(sample_id, label)` sorted by id.
    pub members: Vec<(u64, usize)>,
    pub quotas: BTreeMap<usize, usize>,
    pub provenance: Provenance,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CoresetSidecar {
    provenance: Provenance,
    size: usize,
    quotas: BTreeMap<usize, usize>,
    class_counts: BTreeMap<usize, usize>,
    seed: Option<u64>,
}

impl Coreset {
    fn from_members(
        mut members: Vec<(u64, usize)>,
        quotas: BTreeMap<usize, usize>,
        provenance: Provenance,
        seed: Option<u64>,
    ) -> Self {
        members.sort_unstable();
        Self {
            members,
            quotas,
            provenance,
            seed,
        }
    }

    pub fn sample_ids(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.0).collect()
    }

    pub fn id_set(&self) -> BTreeSet<u64> {
        self.members.iter().map(|m| m.0).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &(_, c) in &self.members {
            *counts.entry(c).or_default() += 1;
        }
        counts
    }

    /// Writes `path` as `sample_id,label` CSV and `<path>.json` as sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let err = |e: &dyn std::fmt::Display| SelectionError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| err(&e))?;
        w.write_record(["sample_id", "label"]).map_err(|e| err(&e))?;
        for &(id, c) in &self.members {
            w.write_record([id.to_string(), c.to_string()]).map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))?;
        let sidecar = CoresetSidecar {
            provenance: self.provenance,
            size: self.len(),
            quotas: self.quotas.clone(),
            class_counts: self.class_counts(),
            seed: self.seed,
        };
        let mut text = serde_json::to_string_pretty(&sidecar).map_err(|e| err(&e))?;
        text.push('\n');
        fs::write(sidecar_path(path), text).map_err(|e| err(&e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| SelectionError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| err(&e))?;
        let members = r
            .deserialize::<(u64, usize)>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(&e))?;
        let text = fs::read_to_string(sidecar_path(path)).map_err(|e| err(&e))?;
        let side: CoresetSidecar = serde_json::from_str(&text).map_err(|e| err(&e))?;
        Ok(Self::from_members(members, side.quotas, side.provenance, side.seed))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Orders rows by score descending, then sample id ascending.
fn by_score_desc(a: &ScoreRow, b: &ScoreRow) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id))
}

/// Keeps the `k_c` best-scoring samples of each class.
pub fn select_topk(scores: &ScoreTable, quotas: &BTreeMap<usize, usize>) -> Result<Coreset> {
    let mut by_class: BTreeMap<usize, Vec<&ScoreRow>> = BTreeMap::new();
    for r in &scores.rows {
        by_class.entry(r.label).or_default().push(r);
    }
    let mut members = Vec::with_capacity(quotas.values().sum());
    for (&class, &quota) in quotas {
        let rows = by_class.get_mut(&class).map(|v| v.as_mut_slice()).unwrap_or(&mut []);
        if quota > rows.len() {
            return Err(SelectionError::QuotaExceedsClass {
                class,
                quota,
                size: rows.len(),
            });
        }
        rows.sort_by(|a, b| by_score_desc(a, b));
        members.extend(rows[..quota].iter().map(|r| (r.sample_id, r.label)));
    }
    Ok(Coreset::from_members(members, quotas.clone(), Provenance::CldTopk, None))
}

/// Keeps the `k_c` worst-scoring samples of each class.
pub fn select_bottomk(scores: &ScoreTable, quotas: &BTreeMap<usize, usize>) -> Result<Coreset> {
    let negated = ScoreTable {
        rows: scores
            .rows
            .iter()
            .map(|r| ScoreRow {
                score: -r.score,
                ..r.clone()
            })
            .collect(),
    };
    select_topk(&negated, quotas)
}

/// Uniformly random class-balanced coreset with the given quotas.
pub fn select_random(scores: &ScoreTable, quotas: &BTreeMap<usize, usize>, seed: u64) -> Result<Coreset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for r in &scores.rows {
        by_class.entry(r.label).or_default().push(r.sample_id);
    }
    let mut members = Vec::new();
    for (&class, &quota) in quotas {
        let mut ids = by_class.remove(&class).unwrap_or_default();
        if quota > ids.len() {
            return Err(SelectionError::QuotaExceedsClass {
                class,
                quota,
                size: ids.len(),
            });
        }
        ids.sort_unstable();
        members.extend(sample_without_replacement(&mut rng, &ids, quota).into_iter().map(|id| (id, class)));
    }
    Ok(Coreset::from_members(members, quotas.clone(), Provenance::Random, Some(seed)))
}

/// Partial Fisher-Yates draw of `k` items from `items` (order of `items` matters).
pub(crate) fn sample_without_replacement<T: Copy, R: Rng>(rng: &mut R, items: &[T], k: usize) -> Vec<T> {
    let mut pool = items.to_vec();
    let n = pool.len() as u64;
    for i in 0..k {
        let j = rng.random_range(i as u64..n) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Assigns items to `bins` equal-width bins spanning `[min, max]` of their scores.
/// Each bin lists its ids in ascending order.
pub fn equal_width_bins(items: &[(u64, f64)], bins: usize) -> Vec<Vec<u64>> {
    let mut out = vec![Vec::new(); bins.max(1)];
    if items.is_empty() {
        return out;
    }
    let lo = items.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let hi = items.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    for &(id, s) in items {
        let b = if width > 0.0 {
            (((s - lo) / width) * bins as f64).floor() as usize
        } else {
            0
        };
        out[b.min(bins - 1)].push(id);
    }
    for b in &mut out {
        b.sort_unstable();
    }
    out
}

/// Splits `k` evenly over bins (the first `k mod B` bins get one extra), then
/// hands the shortfall of bins that are too small round-robin to bins with room.
pub fn equal_bin_budgets(sizes: &[usize], k: usize) -> Vec<usize> {
    let b = sizes.len();
    let mut budget: Vec<usize> = (0..b).map(|i| k / b + usize::from(i < k % b)).collect();
    let mut shortfall = 0;
    for (q, &s) in budget.iter_mut().zip(sizes) {
        if *q > s {
            shortfall += *q - s;
            *q = s;
        }
    }
    while shortfall > 0 {
        let mut progressed = false;
        for i in 0..b {
            if shortfall == 0 {
                break;
            }
            if budget[i] < sizes[i] {
                budget[i] += 1;
                shortfall -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    budget
}

/// CCS-style baseline: drop the lowest-scoring `prune_hardest_fraction` of
/// samples, bin the remaining score range into `num_bins` equal-width bins,
/// and draw an equal budget uniformly at random from each bin.
pub fn ccs_stratified(
    scores: &ScoreTable,
    k: usize,
    num_bins: usize,
    prune_hardest_fraction: f64,
    seed: u64,
) -> Result<Coreset> {
    if num_bins == 0 {
        return Err(SelectionError::InvalidParameter("num_bins must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&prune_hardest_fraction) {
        return Err(SelectionError::InvalidParameter(format!(
            "prune fraction {prune_hardest_fraction} outside [0, 1)"
        )));
    }
    if k == 0 {
        return Err(SelectionError::ZeroBudget);
    }
    let mut rows: Vec<&ScoreRow> = scores.rows.iter().collect();
    rows.sort_by(|a, b| by_score_desc(a, b));
    let pruned = (prune_hardest_fraction * rows.len() as f64).floor() as usize;
    rows.truncate(rows.len() - pruned);
    if k > rows.len() {
        return Err(SelectionError::BudgetTooLarge {
            k,
            available: rows.len(),
        });
    }
    let label_of: BTreeMap<u64, usize> = rows.iter().map(|r| (r.sample_id, r.label)).collect();
    let items: Vec<(u64, f64)> = rows.iter().map(|r| (r.sample_id, r.score)).collect();
    let bins = equal_width_bins(&items, num_bins);
    let sizes: Vec<usize> = bins.iter().map(Vec::len).collect();
    let budgets = equal_bin_budgets(&sizes, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = Vec::with_capacity(k);
    for (bin, &take) in bins.iter().zip(&budgets) {
        members.extend(
            sample_without_replacement(&mut rng, bin, take)
                .into_iter()
                .map(|id| (id, label_of[&id])),
        );
    }
    let mut counts = BTreeMap::new();
    for &(_, c) in &members {
        *counts.entry(c).or_insert(0usize) += 1;
    }
    Ok(Coreset::from_members(members, counts, Provenance::CcsStratified, Some(seed)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationHeuristic {
    Random,
    Lowest,
    Highest,
    EqualBin,
    Proportional,
}

impl std::str::FromStr for ValidationHeuristic {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "random" => Self::Random,
            "lowest" => Self::Lowest,
            "highest" => Self::Highest,
            "equal-bin" | "equal_bin" => Self::EqualBin,
            "proportional" => Self::Proportional,
            other => return Err(format!("unknown heuristic {other:?}")),
        })
    }
}

/// Picks `size` ids from a scored pool. Returned ids are sorted ascending.
pub fn build_validation_set(
    pool_scores: &BTreeMap<u64, f64>,
    size: usize,
    heuristic: ValidationHeuristic,
    bins: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    if size > pool_scores.len() {
        return Err(SelectionError::SizeTooLarge {
            size,
            pool: pool_scores.len(),
        });
    }
    let items: Vec<(u64, f64)> = pool_scores.iter().map(|(&id, &s)| (id, s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = match heuristic {
        ValidationHeuristic::Random => {
            let ids: Vec<u64> = items.iter().map(|x| x.0).collect();
            sample_without_replacement(&mut rng, &ids, size)
        }
        ValidationHeuristic::Lowest | ValidationHeuristic::Highest => {
            let mut sorted = items.clone();
            if heuristic == ValidationHeuristic::Lowest {
                sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            } else {
                sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            }
            sorted.iter().take(size).map(|x| x.0).collect()
        }
        ValidationHeuristic::EqualBin | ValidationHeuristic::Proportional => {
            if bins == 0 {
                return Err(SelectionError::InvalidParameter("bins must be at least 1".into()));
            }
            let binned = equal_width_bins(&items, bins);
            let sizes: Vec<usize> = binned.iter().map(Vec::len).collect();
            let budgets = if heuristic == ValidationHeuristic::EqualBin {
                equal_bin_budgets(&sizes, size)
            } else if size == 0 {
                vec![0; bins]
            } else {
                let hist: BTreeMap<usize, usize> = sizes.iter().copied().enumerate().collect();
                let q = allocate_quotas(size, &hist)?;
                (0..bins).map(|b| q[&b]).collect()
            };
            binned
                .iter()
                .zip(&budgets)
                .flat_map(|(bin, &take)| sample_without_replacement(&mut rng, bin, take))
                .collect()
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}
