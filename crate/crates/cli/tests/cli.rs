use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cld"))
        .args(args)
        .env_remove("CLD_SEED")
        .output()
        .expect("run cld")
}

fn ok(args: &[&str]) -> String {
    let out = cld(args);
    assert!(
        out.status.success(),
        "cld {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small mixture so the end-to-end runs stay quick.
fn write_small_spec(dir: &Path) -> String {
    let spec = serde_json::json!({
        "num_classes": 3,
        "input_dim": 4,
        "class_means": [[1.0, 0.0, 0.0, 0.5], [0.0, 1.0, 0.0, -0.5], [0.0, 0.0, 1.0, 0.0]],
        "noise_scale": 1.0,
        "n_train": 120,
        "n_val": 30,
        "n_query": 8,
        "n_reference": 1200,
        "label_noise_fraction": 0.1,
        "seed": 5
    });
    let path = dir.join("spec.json");
    fs::write(&path, spec.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_small_spec(dir.path());
    for name in ["a", "b"] {
        ok(&["train-synth", "--spec", &spec, "--epochs", "8", "--out", p(&dir.path().join(name))]);
    }
    for f in ["manifest.json", "train.csv", "validation.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn zero_epochs_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = cld(&["train-synth", "--epochs", "0", "--out", p(&out)]);
    assert!(!r.status.success());
    assert!(!out.exists());
}

#[test]
fn score_select_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_small_spec(dir.path());
    let run = dir.path().join("run");
    ok(&["train-synth", "--spec", &spec, "--epochs", "10", "--out", p(&run)]);

    let s1 = dir.path().join("s1.csv");
    let s2 = dir.path().join("s2.csv");
    ok(&["score", "--losslog", p(&run), "--out", p(&s1)]);
    ok(&["score", "--losslog", p(&run.join("manifest.json")), "--out", p(&s2)]);
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    let text = fs::read_to_string(&s1).unwrap();
    assert_eq!(text.lines().count(), 121);
    for line in text.lines().skip(1) {
        let score: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(score.is_finite());
    }

    let thin = dir.path().join("thin.csv");
    ok(&["score", "--losslog", p(&run), "--subsample", "stride=2", "--out", p(&thin)]);
    let mae: f64 = ok(&["score-mae", "--a", p(&s1), "--b", p(&thin)]).trim().parse().unwrap();
    assert!((0.0..=2.0).contains(&mae));

    let c = dir.path().join("c.csv");
    let summary: serde_json::Value = serde_json::from_str(&ok(&[
        "select", "--scores", p(&s1), "--fraction", "0.1", "--out", p(&c), "--format", "json",
    ]))
    .unwrap();
    assert_eq!(summary["size"], 12);
    assert_eq!(fs::read_to_string(&c).unwrap().lines().count(), 13);
    assert!(dir.path().join("c.csv.json").exists());

    let pc = dir.path().join("pc.csv");
    ok(&["select", "--scores", p(&s1), "--per-class", "0=3,1=2", "--out", p(&pc)]);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("pc.csv.json")).unwrap()).unwrap();
    assert_eq!(side["class_counts"], serde_json::json!({"0": 3, "1": 2}));

    let ccs = dir.path().join("ccs.csv");
    ok(&[
        "select", "--scores", p(&s1), "--method", "ccs", "--k", "20", "--bins", "5", "--prune", "0.1", "--seed", "2",
        "--out", p(&ccs),
    ]);
    assert_eq!(fs::read_to_string(&ccs).unwrap().lines().count(), 21);

    let sub = dir.path().join("sub");
    ok(&["subsample", "--losslog", p(&run), "--plan", "prefix=6", "--out", p(&sub)]);
    let header = fs::read_to_string(sub.join("train.csv")).unwrap();
    assert!(header.starts_with("sample_id,label,loss_0,loss_1,loss_2,loss_3,loss_4,loss_5\n"));
}

#[test]
fn missing_inputs_name_the_path() {
    let r = cld(&["score", "--losslog", "/nonexistent/run", "--out", "/tmp/x.csv"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent/run"));
}

#[test]
fn cost_reports_the_worked_example() {
    let table = ok(&["cost", "--method", "CLD", "--preset", "imagenet1k-10pct"]);
    assert!(table.contains("904.821"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&ok(&["cost", "--method", "glister", "--format", "json"])).unwrap();
    assert!((json[0]["total"].as_f64().unwrap() - 60297.481).abs() < 1e-3);
    let csv = ok(&["cost", "--format", "csv", "--unit", "1e18"]);
    assert_eq!(csv.lines().count(), 18);
    let over = ok(&["cost", "--method", "cld", "--param", "T_proxy=45", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&over).unwrap();
    assert_eq!(v[0]["storage"][0]["bytes"], 230_610_060);
    assert!(!cld(&["cost", "--param", "bogus=1"]).status.success());
}

#[test]
fn theory_check_passes_on_a_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_small_spec(dir.path());
    let out = cld(&["theory-check", "--spec", &spec, "--fraction", "0.25", "--epochs", "15"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.matches("PASS").count(), 4, "{text}");
}

#[test]
fn lds_with_two_subsets_is_signed_unit_or_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_small_spec(dir.path());
    let csv = dir.path().join("lds.csv");
    ok(&["lds", "--spec", &spec, "--subsets", "2", "--retrains", "1", "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    for line in text.lines().skip(1) {
        let v = line.split(',').nth(1).unwrap();
        assert!(matches!(v, "" | "1" | "-1"), "{line}");
    }
}

#[test]
fn brittleness_emits_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_small_spec(dir.path());
    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "brittleness", "--spec", &spec, "--k", "0,12", "--seeds", "0,1", "--format", "json",
    ]))
    .unwrap();
    for row in report["rows"].as_array().unwrap() {
        let f = row["mean_flip_fraction"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
}
