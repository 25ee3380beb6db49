//! `cld`: loss-trajectory coreset selection from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cld_core::attribution::{
    brittleness, default_retrain_config, full_data_influence, lds_evaluate, RemovalPolicy, SubsetPlan,
};
use cld_core::costmodel::{self, compute_cost, gigabytes, storage_overhead, Amount, Method, ScenarioParams, Unit};
use cld_core::losslog::{
    delta_trajectories, load_losslog, subsample_checkpoints, write_losslog, Manifest, SubsamplePlan,
};
use cld_core::numfmt::sig17;
use cld_core::scoring::{cld_scores, score_mae, validation_class_average, ScoreMode, ScoreTable};
use cld_core::selection::{ccs_stratified, select_bottomk, select_random, select_topk, Budget};
use cld_core::theory::{check_coreset, TheoryRunConfig};
use cld_core::trainer::{generate_dataset, train_and_log, Dataset, SyntheticSpec, TrainConfig};

#[derive(Parser)]
#[command(name = "cld", version, about = "Coreset selection by correlation of loss differences")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train softmax regression on a synthetic mixture and write loss logs.
    TrainSynth(TrainSynthArgs),
    /// Score training samples from a loss-log directory.
    Score(ScoreArgs),
    /// Select a coreset from a score file.
    Select(SelectArgs),
    /// Thin the checkpoint grid of a loss-log directory.
    Subsample(SubsampleArgs),
    /// Compute and storage cost of a selection method.
    Cost(CostArgs),
    /// Check the convergence diagnostics on a coreset run.
    TheoryCheck(TheoryArgs),
    /// Linear datamodeling score of pairwise correlations.
    Lds(LdsArgs),
    /// Prediction flips after removing attributed samples.
    Brittleness(BrittlenessArgs),
    /// Mean absolute difference between two score files.
    ScoreMae(ScoreMaeArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct DataArgs {
    /// Seed for the synthetic mixture and training.
    #[arg(long, env = "CLD_SEED", default_value_t = 0)]
    seed: u64,
    /// JSON synthetic-mixture spec; the default mixture for `--seed` otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// JSON training config; the defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(SyntheticSpec, TrainConfig)> {
        let spec = match &self.spec {
            Some(p) => read_json(p)?,
            None => SyntheticSpec::default_mixture(self.seed),
        };
        let config = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainConfig {
                seed: self.seed,
                ..TrainConfig::default()
            },
        };
        Ok((spec, config))
    }

    fn dataset(&self) -> Result<(Dataset, TrainConfig)> {
        let (spec, config) = self.load()?;
        Ok((generate_dataset(&spec)?, config))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Args)]
struct TrainSynthArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the manifest and split logs.
    #[arg(long)]
    out: PathBuf,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Override the mini-batch size (0 = full batch).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Also write parameter snapshots to snapshots.json.
    #[arg(long)]
    save_snapshots: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Serialize)]
struct TrainSummary {
    out: PathBuf,
    epochs: usize,
    num_train: usize,
    num_validation: usize,
    final_mean_train_loss: f64,
    reference_accuracy: f64,
}

fn cmd_train_synth(a: &TrainSynthArgs) -> Result<()> {
    let (spec, mut config) = a.data.load()?;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    config.record_parameter_snapshots = a.save_snapshots;
    config.validate()?;
    spec.validate()?;
    let data = generate_dataset(&spec)?;
    let run = train_and_log(&data, &config, None)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = Manifest::new("synthetic-gaussian-mixture", spec.num_classes, spec.seed);
    write_losslog(&a.out, &manifest, &run.train_log, &run.validation_log)?;
    write_json(&a.out.join("synthetic_spec.json"), &spec)?;
    write_json(&a.out.join("train_config.json"), &config)?;
    if let Some(s) = &run.snapshots {
        write_json(&a.out.join("snapshots.json"), s)?;
    }
    let summary = TrainSummary {
        out: a.out.clone(),
        epochs: config.epochs,
        num_train: data.train.len(),
        num_validation: data.validation.len(),
        final_mean_train_loss: *run.mean_train_loss.last().unwrap_or(&f64::NAN),
        reference_accuracy: cld_core::trainer::evaluate(&run.params, &data.reference).1,
    };
    match a.format {
        Format::Json => print_json(&summary),
        Format::Text => {
            println!(
                "wrote {} ({} train, {} validation, {} epochs); reference accuracy {:.4}",
                a.out.display(),
                summary.num_train,
                summary.num_validation,
                summary.epochs,
                summary.reference_accuracy
            );
            Ok(())
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PerClass,
    Global,
}

#[derive(Args)]
struct ScoreArgs {
    /// Loss-log directory or manifest file.
    #[arg(long)]
    losslog: PathBuf,
    /// Output score CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "per-class")]
    mode: ModeArg,
    /// Checkpoint subsampling: prefix=N, stride=S or explicit=0,2,5.
    #[arg(long)]
    subsample: Option<SubsamplePlan>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Serialize)]
struct ScoreSummary {
    out: PathBuf,
    rows: usize,
    degenerate: usize,
    checkpoints: usize,
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let (_, mut train, mut val) = load_losslog(&a.losslog)?;
    if let Some(plan) = &a.subsample {
        train = subsample_checkpoints(&train, plan)?;
        val = subsample_checkpoints(&val, plan)?;
    }
    let avg = validation_class_average(&delta_trajectories(&val))?;
    let mode = match a.mode {
        ModeArg::PerClass => ScoreMode::PerClass,
        ModeArg::Global => ScoreMode::Global,
    };
    let table = cld_scores(&delta_trajectories(&train), &avg, mode)?;
    table.write_csv(&a.out)?;
    let summary = ScoreSummary {
        out: a.out.clone(),
        rows: table.len(),
        degenerate: table.rows.iter().filter(|r| r.degenerate).count(),
        checkpoints: train.grid().len(),
    };
    match a.format {
        Format::Json => print_json(&summary),
        Format::Text => {
            println!(
                "scored {} samples over {} checkpoints ({} degenerate) -> {}",
                summary.rows,
                summary.checkpoints,
                summary.degenerate,
                a.out.display()
            );
            Ok(())
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectMethod {
    Topk,
    Bottomk,
    Random,
    Ccs,
}

#[derive(Args)]
struct SelectArgs {
    /// Score CSV.
    #[arg(long)]
    scores: PathBuf,
    /// Output coreset CSV; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Budget as a fraction of the training set.
    #[arg(long, conflicts_with_all = ["k", "per_class"])]
    fraction: Option<f64>,
    /// Budget as a total number of samples.
    #[arg(long, conflicts_with = "per_class")]
    k: Option<usize>,
    /// Explicit per-class quotas, e.g. "0=3,1=2".
    #[arg(long)]
    per_class: Option<String>,
    #[arg(long, value_enum, default_value = "topk")]
    method: SelectMethod,
    #[arg(long, env = "CLD_SEED", default_value_t = 0)]
    seed: u64,
    /// Score bins for --method ccs.
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Fraction of lowest-scoring samples pruned before CCS binning.
    #[arg(long, default_value_t = 0.1)]
    prune: f64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn parse_per_class(s: &str) -> Result<BTreeMap<usize, usize>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (c, q) = p.split_once('=').with_context(|| format!("expected CLASS=QUOTA, got {p:?}"))?;
            Ok((c.trim().parse()?, q.trim().parse()?))
        })
        .collect()
}

#[derive(Serialize)]
struct SelectSummary {
    out: PathBuf,
    size: usize,
    class_counts: BTreeMap<usize, usize>,
}

fn cmd_select(a: &SelectArgs) -> Result<()> {
    let table = ScoreTable::read_csv(&a.scores)?;
    let budget = match (a.fraction, a.k, &a.per_class) {
        (Some(p), _, _) => Budget::Fraction(p),
        (_, Some(k), _) => Budget::Total(k),
        (_, _, Some(s)) => Budget::PerClass(parse_per_class(s)?),
        _ => bail!("one of --fraction, --k or --per-class is required"),
    };
    let quotas = budget.resolve(&table.class_sizes())?;
    let coreset = match a.method {
        SelectMethod::Topk => select_topk(&table, &quotas)?,
        SelectMethod::Bottomk => select_bottomk(&table, &quotas)?,
        SelectMethod::Random => select_random(&table, &quotas, a.seed)?,
        SelectMethod::Ccs => ccs_stratified(&table, quotas.values().sum(), a.bins, a.prune, a.seed)?,
    };
    coreset.write(&a.out)?;
    let summary = SelectSummary {
        out: a.out.clone(),
        size: coreset.len(),
        class_counts: coreset.class_counts(),
    };
    match a.format {
        Format::Json => print_json(&summary),
        Format::Text => {
            println!("selected {} samples -> {}", summary.size, a.out.display());
            Ok(())
        }
    }
}

#[derive(Args)]
struct SubsampleArgs {
    #[arg(long)]
    losslog: PathBuf,
    /// prefix=N, stride=S or explicit=0,2,5.
    #[arg(long)]
    plan: SubsamplePlan,
    /// Output loss-log directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn cmd_subsample(a: &SubsampleArgs) -> Result<()> {
    let (manifest, train, val) = load_losslog(&a.losslog)?;
    let train = subsample_checkpoints(&train, &a.plan)?;
    let val = subsample_checkpoints(&val, &a.plan)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = Manifest::new(manifest.dataset_name, manifest.num_classes, manifest.seed);
    write_losslog(&a.out, &manifest, &train, &val)?;
    let grid = train.grid().indices().to_vec();
    match a.format {
        Format::Json => print_json(&serde_json::json!({ "out": a.out, "checkpoints": grid })),
        Format::Text => {
            println!("kept {} checkpoints {} -> {}", grid.len(), train.grid(), a.out.display());
            Ok(())
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum CostFormat {
    Table,
    Json,
    Csv,
}

#[derive(Args)]
struct CostArgs {
    /// Method name, or "all".
    #[arg(long, default_value = "all")]
    method: String,
    #[arg(long, default_value = costmodel::PRESET_IMAGENET)]
    preset: String,
    /// Parameter override NAME=VALUE; repeatable.
    #[arg(long = "param")]
    params: Vec<String>,
    /// Display unit: flops, 1e15 or 1e18.
    #[arg(long, default_value = "1e15")]
    unit: Unit,
    #[arg(long, value_enum, default_value = "table")]
    format: CostFormat,
}

#[derive(Serialize)]
struct CostRow {
    method: Method,
    unit: String,
    terms: Vec<TermRow>,
    total: f64,
    total_flops: String,
    selection: f64,
    storage: Vec<StorageRow>,
    notes: Vec<String>,
}

#[derive(Serialize)]
struct TermRow {
    label: String,
    formula: String,
    stage: costmodel::Stage,
    value: Option<f64>,
    flops: String,
}

#[derive(Serialize)]
struct StorageRow {
    label: String,
    formula: String,
    bytes: u128,
    gigabytes: f64,
}

fn amount_text(a: Amount) -> String {
    match a {
        Amount::Exact(v) => v.to_string(),
        Amount::Approx(v) => sig17(v),
        Amount::Symbolic => "symbolic".into(),
    }
}

fn cost_row(method: Method, p: &ScenarioParams, unit: Unit) -> Result<CostRow> {
    let r = compute_cost(method, p)?;
    let s = storage_overhead(method, p)?;
    Ok(CostRow {
        method,
        unit: unit.to_string(),
        terms: r
            .terms
            .iter()
            .map(|t| TermRow {
                label: t.label.clone(),
                formula: t.formula.clone(),
                stage: t.stage,
                value: (t.flops != Amount::Symbolic).then(|| unit.scale(t.flops.as_f64())),
                flops: amount_text(t.flops),
            })
            .collect(),
        total: unit.scale(r.total_flops()),
        total_flops: amount_text(r.total),
        selection: unit.scale(r.selection_flops()),
        storage: s
            .items
            .iter()
            .map(|i| StorageRow {
                label: i.label.clone(),
                formula: i.formula.clone(),
                bytes: i.bytes,
                gigabytes: gigabytes(i.bytes),
            })
            .collect(),
        notes: r.notes,
    })
}

fn cmd_cost(a: &CostArgs) -> Result<()> {
    let mut p = costmodel::preset(&a.preset).with_context(|| format!("unknown preset {:?}", a.preset))?;
    for kv in &a.params {
        let (k, v) = kv.split_once('=').with_context(|| format!("expected NAME=VALUE, got {kv:?}"))?;
        p.set(k.trim(), v)?;
    }
    let methods: Vec<Method> = if a.method.eq_ignore_ascii_case("all") {
        Method::ALL.to_vec()
    } else {
        vec![a.method.parse()?]
    };
    let rows = methods
        .into_iter()
        .map(|m| cost_row(m, &p, a.unit))
        .collect::<Result<Vec<_>>>()?;
    let mut out = std::io::stdout().lock();
    match a.format {
        CostFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?,
        CostFormat::Csv => {
            writeln!(out, "method,total,selection,unit,total_flops,storage_bytes")?;
            for r in &rows {
                writeln!(
                    out,
                    "{},{:.3},{:.3},{},{},{}",
                    r.method, r.total, r.selection, r.unit, r.total_flops, r.storage[0].bytes
                )?;
            }
        }
        CostFormat::Table => {
            for r in &rows {
                writeln!(out, "{}  total {:.3} (x{} FLOPs)", r.method, r.total, r.unit)?;
                for t in &r.terms {
                    let v = t.value.map_or("big-O, excluded".to_string(), |v| format!("{v:.3}"));
                    writeln!(out, "    {:<45} {:<42} {v}", t.label, t.formula)?;
                }
                for s in &r.storage {
                    writeln!(
                        out,
                        "    storage {:<37} {:<42} {} B ({:.3} GB)",
                        s.label, s.formula, s.bytes, s.gigabytes
                    )?;
                }
                for n in &r.notes {
                    writeln!(out, "    note: {n}")?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum CoresetKind {
    Top,
    Bottom,
    Random,
}

#[derive(Args)]
struct TheoryArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Coreset size as a fraction of the training set.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    /// Which coreset to check.
    #[arg(long, value_enum, default_value = "top")]
    coreset: CoresetKind,
    /// Epochs of the checked coreset run.
    #[arg(long, default_value_t = TheoryRunConfig::default().epochs)]
    epochs: usize,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn cmd_theory_check(a: &TheoryArgs) -> Result<bool> {
    let (data, config) = a.data.dataset()?;
    let run = train_and_log(&data, &config, None)?;
    let avg = validation_class_average(&delta_trajectories(&run.validation_log))?;
    let table = cld_scores(&delta_trajectories(&run.train_log), &avg, ScoreMode::PerClass)?;
    let quotas = Budget::Fraction(a.fraction).resolve(&table.class_sizes())?;
    let coreset = match a.coreset {
        CoresetKind::Top => select_topk(&table, &quotas)?,
        CoresetKind::Bottom => select_bottomk(&table, &quotas)?,
        CoresetKind::Random => select_random(&table, &quotas, a.data.seed)?,
    };
    let cfg = TheoryRunConfig {
        epochs: a.epochs,
        ..TheoryRunConfig::default()
    };
    let check = check_coreset(&data, &coreset.sample_ids(), &cfg)?;
    let pass = check.all_hold();
    if a.format == Format::Json {
        print_json(&serde_json::json!({ "pass": pass, "check": check }))?;
        return Ok(pass);
    }
    let b = &check.bound;
    let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let lemma_failures = check
        .alignment
        .checkpoints
        .iter()
        .filter(|c| !c.flagged && !c.lemma_holds)
        .count();
    println!(
        "coreset {} samples; smoothness {:.6}, step {:.6}, gradient bound {:.6}",
        check.alignment.coreset_size, b.smoothness, b.learning_rate, b.gradient_bound
    );
    println!(
        "{}  alignment lemma at {} checkpoints ({} violations)",
        mark(check.alignment.lemma_holds()),
        check.alignment.checkpoints.len(),
        lemma_failures
    );
    println!(
        "{}  descent inequality over {} steps",
        mark(b.descent_holds),
        b.descent.len()
    );
    println!(
        "{}  bound: min |grad|^2 {:.6e} <= {:.6e} (slack {:.6e}; kappa {:.4}, delta {:.4})",
        mark(b.bound_holds && b.slack > 0.0),
        b.min_grad_norm_sq,
        b.bound,
        b.slack,
        b.kappa,
        b.delta
    );
    println!("{}  step size within 1/L", mark(b.step_size_ok));
    Ok(pass)
}

#[derive(Args)]
struct LdsArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of random training subsets.
    #[arg(long, default_value_t = 20)]
    subsets: usize,
    /// Subset sampling ratio.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Retrains per subset.
    #[arg(long, default_value_t = 3)]
    retrains: usize,
    /// Per-query CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, sig17)
}

fn cmd_lds(a: &LdsArgs) -> Result<()> {
    let (data, config) = a.data.dataset()?;
    let plan = SubsetPlan::new(a.subsets, a.alpha, a.retrains, a.data.seed);
    let rep = lds_evaluate(&data, &plan, &config, &default_retrain_config())?;
    if let Some(p) = &a.out {
        let mut text = String::from("query_id,lds\n");
        for q in &rep.per_query {
            text.push_str(&format!("{},{}\n", q.query_id, opt_num(q.lds)));
        }
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    match a.format {
        Format::Json => print_json(&rep),
        Format::Text => {
            println!(
                "mean LDS {} over {} of {} queries ({} subsets, alpha {}, {} retrains)",
                rep.mean_lds.map_or("undefined".into(), |v| format!("{v:.4}")),
                rep.num_defined,
                rep.per_query.len(),
                a.subsets,
                a.alpha,
                a.retrains
            );
            Ok(())
        }
    }
}

#[derive(Args)]
struct BrittlenessArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Removal sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "200")]
    k: Vec<usize>,
    /// Removal policies, comma separated: cld_topk, random.
    #[arg(long, value_delimiter = ',', default_value = "cld_topk,random")]
    policies: Vec<RemovalPolicy>,
    /// Retrain seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn cmd_brittleness(a: &BrittlenessArgs) -> Result<()> {
    let (data, config) = a.data.dataset()?;
    let scores = full_data_influence(&data, &config)?;
    let rep = brittleness(&data, &scores, &a.k, &a.policies, &default_retrain_config(), &a.seeds)?;
    if let Some(p) = &a.out {
        let mut text = String::from("policy,k,mean_flip_fraction\n");
        for r in &rep.rows {
            let policy = serde_json::to_value(r.policy)?;
            text.push_str(&format!(
                "{},{},{}\n",
                policy.as_str().unwrap_or_default(),
                r.k,
                sig17(r.mean_flip_fraction)
            ));
        }
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    match a.format {
        Format::Json => print_json(&rep),
        Format::Text => {
            for r in &rep.rows {
                println!("{:?} k={} flip fraction {:.4}", r.policy, r.k, r.mean_flip_fraction);
            }
            Ok(())
        }
    }
}

#[derive(Args)]
struct ScoreMaeArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn cmd_score_mae(a: &ScoreMaeArgs) -> Result<()> {
    let mae = score_mae(&ScoreTable::read_csv(&a.a)?, &ScoreTable::read_csv(&a.b)?)?;
    match a.format {
        Format::Json => print_json(&serde_json::json!({ "mae": mae })),
        Format::Text => {
            println!("{}", sig17(mae));
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::TrainSynth(a) => cmd_train_synth(a)?,
        Command::Score(a) => cmd_score(a)?,
        Command::Select(a) => cmd_select(a)?,
        Command::Subsample(a) => cmd_subsample(a)?,
        Command::Cost(a) => cmd_cost(a)?,
        Command::TheoryCheck(a) => return cmd_theory_check(a),
        Command::Lds(a) => cmd_lds(a)?,
        Command::Brittleness(a) => cmd_brittleness(a)?,
        Command::ScoreMae(a) => cmd_score_mae(a)?,
    }
    Ok(true)
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
