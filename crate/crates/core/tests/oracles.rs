mod common;

use std::collections::BTreeMap;

use cld_core::losslog::{delta_trajectories, load_losslog, write_losslog, LossLogError, Manifest};
use cld_core::scoring::{cld_scores, validation_class_average, ScoreMode, ScoreTable};
use cld_core::selection::{build_validation_set, ValidationHeuristic};
use common::*;

#[test]
fn global_mode_matches_oracle() {
    let mut r = rng(21);
    for _ in 0..30 {
        let inst = random_instance(&mut r, 80, 30, 12, 4);
        let td = oracle_deltas(inst.train.losses());
        let vd = oracle_deltas(inst.validation.losses());
        let t = vd[0].len();
        let mut global = vec![0.0; t];
        for row in &vd {
            for j in 0..t {
                global[j] += row[j];
            }
        }
        for v in &mut global {
            *v /= vd.len() as f64;
        }
        let avg = validation_class_average(&delta_trajectories(&inst.validation)).unwrap();
        let table = cld_scores(&delta_trajectories(&inst.train), &avg, ScoreMode::Global).unwrap();
        for (row, d) in table.rows.iter().zip(&td) {
            let want = oracle_pearson(d, &global).unwrap_or(0.0);
            assert!((row.score - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn score_table_round_trips_through_csv() {
    let mut r = rng(22);
    let inst = random_instance(&mut r, 60, 20, 8, 3);
    let avg = validation_class_average(&delta_trajectories(&inst.validation)).unwrap();
    let table = cld_scores(&delta_trajectories(&inst.train), &avg, ScoreMode::PerClass).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scores.csv");
    table.write_csv(&p).unwrap();
    assert_eq!(ScoreTable::read_csv(&p).unwrap(), table);
}

#[test]
fn losslog_directory_round_trip() {
    let mut r = rng(23);
    let inst = random_instance(&mut r, 40, 15, 6, 3);
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new("random", inst.num_classes, 23);
    write_losslog(dir.path(), &m, &inst.train, &inst.validation).unwrap();
    let (m2, train, val) = load_losslog(dir.path()).unwrap();
    assert_eq!(m2, m);
    assert_eq!(train, inst.train);
    assert_eq!(val, inst.validation);
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_losslog(&dir.path().join("nope")),
        Err(LossLogError::MissingFile(_))
    ));
}

#[test]
fn validation_heuristics_match_brute_force() {
    let pool: BTreeMap<u64, f64> = (0..40u64).map(|i| (i * 5, ((i * 37) % 17) as f64 / 4.0)).collect();
    let mut by_score: Vec<(u64, f64)> = pool.iter().map(|(&i, &s)| (i, s)).collect();
    by_score.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let mut lowest: Vec<u64> = by_score.iter().take(7).map(|x| x.0).collect();
    lowest.sort_unstable();
    assert_eq!(
        build_validation_set(&pool, 7, ValidationHeuristic::Lowest, 0, 0).unwrap(),
        lowest
    );
    by_score.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut highest: Vec<u64> = by_score.iter().take(7).map(|x| x.0).collect();
    highest.sort_unstable();
    assert_eq!(
        build_validation_set(&pool, 7, ValidationHeuristic::Highest, 0, 0).unwrap(),
        highest
    );
    for h in [
        ValidationHeuristic::Random,
        ValidationHeuristic::EqualBin,
        ValidationHeuristic::Proportional,
    ] {
        let a = build_validation_set(&pool, 12, h, 4, 9).unwrap();
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|id| pool.contains_key(id)));
        assert_eq!(a, build_validation_set(&pool, 12, h, 4, 9).unwrap());
    }
    assert!(build_validation_set(&pool, 41, ValidationHeuristic::Random, 1, 0).is_err());
}
