//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cld_core::losslog::{CheckpointGrid, LossLog, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Pearson with population moments; `None` for a constant input.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let mut mx = 0.0;
    let mut my = 0.0;
    for i in 0..n {
        mx += x[i];
        my += y[i];
    }
    mx /= n as f64;
    my /= n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        cov += (x[i] - mx) * (y[i] - my);
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
    }
    let constant_x = x.iter().all(|&v| v == x[0]);
    let constant_y = y.iter().all(|&v| v == y[0]);
    if constant_x || constant_y || vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

pub fn oracle_deltas(losses: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for row in losses {
        let mut d = Vec::new();
        for t in 1..row.len() {
            d.push(row[t] - row[t - 1]);
        }
        out.push(d);
    }
    out
}

pub fn oracle_class_means(deltas: &[Vec<f64>], labels: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let mut out = BTreeMap::new();
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    for c in classes {
        let mut sum = vec![0.0; deltas[0].len()];
        let mut count = 0;
        for (row, &l) in deltas.iter().zip(labels) {
            if l == c {
                for t in 0..row.len() {
                    sum[t] += row[t];
                }
                count += 1;
            }
        }
        for v in &mut sum {
            *v /= count as f64;
        }
        out.insert(c, sum);
    }
    out
}

/// Per class: sort by score descending then id ascending and take the quota.
pub fn oracle_topk(rows: &[(u64, usize, f64)], quotas: &BTreeMap<usize, usize>) -> Vec<u64> {
    let mut chosen = Vec::new();
    for (&c, &q) in quotas {
        let mut mine: Vec<(u64, f64)> = rows.iter().filter(|r| r.1 == c).map(|r| (r.0, r.2)).collect();
        for i in 0..mine.len() {
            for j in 0..mine.len() - 1 - i {
                let (a, b) = (mine[j], mine[j + 1]);
                if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                    mine.swap(j, j + 1);
                }
            }
        }
        chosen.extend(mine.iter().take(q).map(|m| m.0));
    }
    chosen.sort_unstable();
    chosen
}

pub struct Instance {
    pub num_classes: usize,
    pub train: LossLog,
    pub validation: LossLog,
}

/// A random loss-log pair; every class appears in both splits. Some rows are
/// made constant to exercise degenerate handling.
pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize, max_q: usize, max_t: usize, max_c: usize) -> Instance {
    let c = rng.random_range(2..=max_c);
    let t = rng.random_range(3..=max_t);
    let n = rng.random_range(c..=max_n);
    let q = rng.random_range(c..=max_q);
    let grid = CheckpointGrid::dense(t as u64).unwrap();
    let make = |split: Split, rows: usize, rng: &mut ChaCha8Rng| {
        let labels: Vec<usize> = (0..rows).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
        let losses: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                if rng.random_bool(0.05) {
                    vec![rng.random_range(0.0..3.0); t + 1]
                } else {
                    (0..=t).map(|_| rng.random_range(0.0..3.0)).collect()
                }
            })
            .collect();
        let ids: Vec<u64> = (0..rows as u64).map(|i| i * 3 + 1).collect();
        LossLog::new(split, ids, labels, grid.clone(), losses).unwrap()
    };
    let train = make(Split::Train, n, rng);
    let validation = make(Split::Validation, q, rng);
    Instance {
        num_classes: c,
        train,
        validation,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
