mod common;

use std::collections::{BTreeMap, BTreeSet};

use cld_core::attribution::{group_attribution, spearman};
use cld_core::losslog::{delta_trajectories, subsample_checkpoints, CheckpointGrid, LossLog, Split, SubsamplePlan};
use cld_core::scoring::{pearson, InfluenceMatrix, ScoreRow, ScoreTable};
use cld_core::selection::{allocate_quotas, ccs_stratified, select_random, select_topk};
use common::oracle_topk;
use proptest::prelude::*;

fn vec_pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0..100.0f64, n),
            prop::collection::vec(-100.0..100.0f64, n),
        )
    })
}

fn score_table() -> impl Strategy<Value = ScoreTable> {
    prop::collection::vec((0usize..4, -3i32..4), 1..80).prop_map(|rows| ScoreTable {
        rows: rows
            .into_iter()
            .enumerate()
            .map(|(i, (label, s))| ScoreRow {
                sample_id: (i as u64) * 2 + 5,
                label,
                score: s as f64 / 3.0,
                degenerate: false,
            })
            .collect(),
    })
}

fn loss_log() -> impl Strategy<Value = LossLog> {
    (1usize..20, 2usize..15).prop_flat_map(|(n, t)| {
        prop::collection::vec(prop::collection::vec(0.0..10.0f64, t), n).prop_map(move |losses| {
            LossLog::new(
                Split::Train,
                (0..n as u64).collect(),
                (0..n).map(|i| i % 3).collect(),
                CheckpointGrid::dense(t as u64 - 1).unwrap(),
                losses,
            )
            .unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pearson_is_bounded_and_symmetric((x, y) in vec_pair(30)) {
        let a = pearson(&x, &y).unwrap();
        let b = pearson(&y, &x).unwrap();
        prop_assert!((-1.0..=1.0).contains(&a.or_zero()));
        prop_assert!((a.or_zero() - b.or_zero()).abs() < 1e-12);
        prop_assert_eq!(a.is_degenerate(), b.is_degenerate());
    }

    #[test]
    fn pearson_affine_invariance((x, y) in vec_pair(30), scale in 0.01..100.0f64, shift in -1e3..1e3f64) {
        let xs: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let a = pearson(&x, &y).unwrap().or_zero();
        let b = pearson(&xs, &y).unwrap().or_zero();
        prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
    }

    #[test]
    fn deltas_telescope(log in loss_log()) {
        let d = delta_trajectories(&log);
        for (row, losses) in d.deltas().iter().zip(log.losses()) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - (losses[losses.len() - 1] - losses[0])).abs() < 1e-9);
        }
    }

    #[test]
    fn subsampling_commutes_with_row_selection(log in loss_log(), stride in 1usize..4, keep in prop::collection::vec(any::<bool>(), 20)) {
        let ids: BTreeSet<u64> = log.sample_ids().iter().copied().filter(|&i| keep[i as usize]).collect();
        let plan = SubsamplePlan::Stride(stride);
        match (subsample_checkpoints(&log, &plan), subsample_checkpoints(&log.select_rows(&ids), &plan)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.select_rows(&ids), b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one side failed"),
        }
    }

    #[test]
    fn loss_log_csv_round_trip(log in loss_log()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        log.write_csv(&path).unwrap();
        prop_assert_eq!(LossLog::read_csv(&path, Split::Train).unwrap(), log);
    }

    #[test]
    fn quotas_conserve_k(sizes in prop::collection::btree_map(0usize..8, 1usize..60, 1..6), frac in 0.0..1.0f64) {
        let total: usize = sizes.values().sum();
        let k = ((frac * total as f64) as usize).max(1);
        let q = allocate_quotas(k, &sizes).unwrap();
        prop_assert_eq!(q.values().sum::<usize>(), k);
        for (c, v) in &q {
            prop_assert!(*v <= sizes[c]);
        }
    }

    #[test]
    fn topk_matches_sort_oracle(table in score_table(), frac in 0.0..1.0f64) {
        let sizes = table.class_sizes();
        let k = ((frac * table.len() as f64) as usize).max(1);
        let quotas = allocate_quotas(k, &sizes).unwrap();
        let rows: Vec<(u64, usize, f64)> = table.rows.iter().map(|r| (r.sample_id, r.label, r.score)).collect();
        let got = select_topk(&table, &quotas).unwrap();
        prop_assert_eq!(got.sample_ids(), oracle_topk(&rows, &quotas));
        prop_assert_eq!(got.class_counts().into_iter().filter(|(_, v)| *v > 0).collect::<BTreeMap<_, _>>(),
            quotas.into_iter().filter(|(_, v)| *v > 0).collect::<BTreeMap<_, _>>());
    }

    #[test]
    fn topk_monotone_in_class_quota(table in score_table(), class in 0usize..4) {
        let sizes = table.class_sizes();
        let Some(&n_c) = sizes.get(&class) else { return Ok(()) };
        let mut q: BTreeMap<usize, usize> = sizes.keys().map(|&c| (c, 0)).collect();
        for j in 0..n_c {
            q.insert(class, j);
            let a = select_topk(&table, &q).unwrap().id_set();
            q.insert(class, j + 1);
            let b = select_topk(&table, &q).unwrap().id_set();
            prop_assert!(a.is_subset(&b));
            prop_assert_eq!(b.len(), a.len() + 1);
        }
    }

    #[test]
    fn random_selection_is_seeded(table in score_table(), seed in any::<u64>()) {
        let quotas = allocate_quotas(table.len().div_ceil(2), &table.class_sizes()).unwrap();
        let a = select_random(&table, &quotas, seed).unwrap();
        prop_assert_eq!(&a, &select_random(&table, &quotas, seed).unwrap());
        prop_assert_eq!(a.len(), table.len().div_ceil(2));
    }

    #[test]
    fn ccs_returns_k_distinct_ids(table in score_table(), seed in any::<u64>(), bins in 1usize..10) {
        let k = table.len() / 3;
        if k == 0 { return Ok(()) }
        let c = ccs_stratified(&table, k, bins, 0.1, seed).unwrap();
        prop_assert_eq!(c.len(), k);
        prop_assert_eq!(c.id_set().len(), k);
    }

    #[test]
    fn spearman_invariant_under_monotone_maps((x, y) in vec_pair(25)) {
        let Ok(r) = spearman(&x, &y) else { return Ok(()) };
        let fx: Vec<f64> = x.iter().map(|v| (v / 50.0).exp() * 3.0 - 1.0).collect();
        let gy: Vec<f64> = y.iter().map(|v| v * v * v).collect();
        prop_assert!((spearman(&fx, &gy).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn group_attribution_is_additive(values in prop::collection::vec(-1.0..1.0f64, 2..40), split in any::<u64>()) {
        let n = values.len();
        let m = InfluenceMatrix {
            train_ids: (0..n as u64).collect(),
            query_ids: vec![0],
            values: values.iter().map(|&v| vec![v]).collect(),
        };
        let (a, b): (Vec<u64>, Vec<u64>) = (0..n as u64).partition(|i| (split >> (i % 64)) & 1 == 1);
        let whole = group_attribution(&m, 0, &m.train_ids).unwrap();
        let parts = group_attribution(&m, 0, &a).unwrap() + group_attribution(&m, 0, &b).unwrap();
        prop_assert!((whole - parts).abs() < 1e-12);
        let naive: f64 = values.iter().sum();
        prop_assert!((whole - naive).abs() < 1e-12);
    }
}

/// Equal per-bin budgets should make the bin of a CCS pick roughly uniform.
#[test]
fn ccs_bins_are_sampled_uniformly() {
    let table = ScoreTable {
        rows: (0..1000u64)
            .map(|i| ScoreRow {
                sample_id: i,
                label: 0,
                score: i as f64 / 999.0,
                degenerate: false,
            })
            .collect(),
    };
    let bins = 5;
    let mut counts = vec![0usize; bins];
    for seed in 0..200 {
        for id in ccs_stratified(&table, 50, bins, 0.0, seed).unwrap().sample_ids() {
            counts[((id as usize) * bins / 1000).min(bins - 1)] += 1;
        }
    }
    let expected = counts.iter().sum::<usize>() as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 4 degrees of freedom, 0.999 quantile.
    assert!(chi2 < 18.47, "chi2 {chi2} counts {counts:?}");
}
