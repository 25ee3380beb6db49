//! Closed-form end-to-end compute and selection-stage storage costs of
//! coreset selection methods.
//!
//! One training step is taken as three forward passes per example. Totals are
//! the cost of selecting a size-`k` coreset plus training the large model on
//! it. Terms that are only known up to big-O are kept as annotations and
//! contribute 0 to the total.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("missing parameter {0}")]
    MissingParam(&'static str),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("invalid value {value:?} for parameter {name}")]
    InvalidValue { name: String, value: String },
    #[error("unknown unit {0:?}")]
    UnknownUnit(String),
    #[error("arithmetic overflow evaluating {0}")]
    Overflow(&'static str),
}

pub type Result<T, E = CostError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Herding,
    Forgetting,
    Aum,
    Cal,
    GraNd,
    El2n,
    Moderate,
    D2Pruning,
    Craig,
    Glister,
    GraphCut,
    SloCurv,
    Tdds,
    DynUnc,
    Dual,
    BoundarySetCcs,
    Cld,
}

impl Method {
    pub const ALL: [Method; 17] = [
        Method::Herding,
        Method::Forgetting,
        Method::Aum,
        Method::Cal,
        Method::GraNd,
        Method::El2n,
        Method::Moderate,
        Method::D2Pruning,
        Method::Craig,
        Method::Glister,
        Method::GraphCut,
        Method::SloCurv,
        Method::Tdds,
        Method::DynUnc,
        Method::Dual,
        Method::BoundarySetCcs,
        Method::Cld,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Herding => "herding",
            Method::Forgetting => "forgetting",
            Method::Aum => "aum",
            Method::Cal => "cal",
            Method::GraNd => "grand",
            Method::El2n => "el2n",
            Method::Moderate => "moderate",
            Method::D2Pruning => "d2-pruning",
            Method::Craig => "craig",
            Method::Glister => "glister",
            Method::GraphCut => "graphcut",
            Method::SloCurv => "slocurv",
            Method::Tdds => "tdds",
            Method::DynUnc => "dyn-unc",
            Method::Dual => "dual",
            Method::BoundarySetCcs => "boundaryset-ccs",
            Method::Cld => "cld",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Method::ALL
            .into_iter()
            .find(|m| m.name().replace('-', "") == key)
            .or(match key.as_str() {
                "d2" | "dpruning" => Some(Method::D2Pruning),
                "boundaryset" | "ccs" => Some(Method::BoundarySetCcs),
                "dynamicuncertainty" => Some(Method::DynUnc),
                _ => None,
            })
            .ok_or_else(|| CostError::UnknownMethod(s.to_string()))
    }
}

/// Scenario parameters. Fields a method does not reference may stay unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub n: Option<u64>,
    pub q: Option<u64>,
    pub k: Option<u64>,
    pub d: Option<u64>,
    pub c: Option<u64>,
    pub feature_dim: Option<u64>,
    pub t: Option<u64>,
    pub t_proxy: Option<u64>,
    pub t_early: Option<u64>,
    /// Defaults to `t - t_early`.
    pub t_late: Option<u64>,
    pub t_proxy_early: Option<u64>,
    pub repeats: Option<u64>,
    pub window: Option<u64>,
    pub reselect_interval: Option<u64>,
    pub anchor_spacing: Option<u64>,
    pub epsilon: Option<f64>,
    pub pgd_steps: Option<u64>,
    /// Defaults to `n`.
    pub unlabeled: Option<u64>,
    pub f: Option<u64>,
    pub f_large: Option<u64>,
}

/// Parameter names accepted by [`ScenarioParams::set`].
pub const PARAM_NAMES: [&str; 20] = [
    "N", "Q", "k", "d", "c", "F", "T", "T_proxy", "T_early", "T_late", "T_proxy_early", "R", "J", "gamma",
    "gamma_anc", "epsilon", "K_bar", "U", "f", "f_large",
];

impl ScenarioParams {
    /// Sets one parameter by name, e.g. `("T_proxy", "45")`.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let invalid = || CostError::InvalidValue {
            name: name.to_string(),
            value: value.to_string(),
        };
        if name == "epsilon" || name == "eps" {
            let v: f64 = value.trim().parse().map_err(|_| invalid())?;
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid());
            }
            self.epsilon = Some(v);
            return Ok(());
        }
        let cleaned: String = value.trim().chars().filter(|&c| c != '_' && c != ',').collect();
        let v: u64 = cleaned.parse().map_err(|_| invalid())?;
        let slot = match name {
            "N" => &mut self.n,
            "Q" => &mut self.q,
            "k" => &mut self.k,
            "d" => &mut self.d,
            "c" => &mut self.c,
            "F" => &mut self.feature_dim,
            "T" => &mut self.t,
            "T_proxy" => &mut self.t_proxy,
            "T_early" => &mut self.t_early,
            "T_late" => &mut self.t_late,
            "T_proxy_early" => &mut self.t_proxy_early,
            "R" => &mut self.repeats,
            "J" => &mut self.window,
            "gamma" => &mut self.reselect_interval,
            "gamma_anc" => &mut self.anchor_spacing,
            "K_bar" => &mut self.pgd_steps,
            "U" => &mut self.unlabeled,
            "f" => &mut self.f,
            "f_large" => &mut self.f_large,
            _ => return Err(CostError::UnknownParam(name.to_string())),
        };
        *slot = Some(v);
        Ok(())
    }

    fn req(v: Option<u64>, name: &'static str) -> Result<u128> {
        v.map(u128::from).ok_or(CostError::MissingParam(name))
    }

    fn n(&self) -> Result<u128> {
        Self::req(self.n, "N")
    }
    fn q(&self) -> Result<u128> {
        Self::req(self.q, "Q")
    }
    fn k(&self) -> Result<u128> {
        Self::req(self.k, "k")
    }
    fn t(&self) -> Result<u128> {
        Self::req(self.t, "T")
    }
    fn t_proxy(&self) -> Result<u128> {
        Self::req(self.t_proxy, "T_proxy")
    }
    fn t_early(&self) -> Result<u128> {
        Self::req(self.t_early, "T_early")
    }
    fn f(&self) -> Result<u128> {
        Self::req(self.f, "f")
    }
    fn f_large(&self) -> Result<u128> {
        Self::req(self.f_large, "f_large")
    }
    fn unlabeled(&self) -> Result<u128> {
        Self::req(self.unlabeled.or(self.n), "U")
    }

    fn t_late(&self) -> Result<u128> {
        if let Some(v) = self.t_late {
            return Ok(v.into());
        }
        let (t, e) = (self.t()?, self.t_early()?);
        t.checked_sub(e).ok_or(CostError::InvalidValue {
            name: "T_early".into(),
            value: e.to_string(),
        })
    }
}

/// The 10% ImageNet-1k scenario used for the worked cost estimates.
pub fn imagenet_scenario() -> ScenarioParams {
    ScenarioParams {
        n: Some(1_268_355),
        q: Some(12_812),
        k: Some(126_836),
        d: Some(150_528),
        c: Some(1000),
        feature_dim: Some(512),
        t: Some(90),
        t_proxy: Some(90),
        t_early: Some(10),
        t_late: Some(80),
        t_proxy_early: Some(50),
        repeats: Some(10),
        window: Some(10),
        reselect_interval: Some(20),
        anchor_spacing: None,
        epsilon: Some(0.01),
        pgd_steps: Some(50),
        unlabeled: None,
        f: Some(1_818_228_160),
        f_large: Some(8_178_000_000),
    }
}

pub const PRESET_IMAGENET: &str = "imagenet1k-10pct";

pub fn preset(name: &str) -> Option<ScenarioParams> {
    (name == PRESET_IMAGENET).then(imagenet_scenario)
}

/// A FLOP count. Integer inputs give exact values; terms with a logarithm
/// or a non-integer factor are floating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Amount {
    Exact(u128),
    Approx(f64),
    /// Known only up to big-O; contributes 0.
    Symbolic,
}

impl Amount {
    pub fn as_f64(self) -> f64 {
        match self {
            Amount::Exact(v) => v as f64,
            Amount::Approx(v) => v,
            Amount::Symbolic => 0.0,
        }
    }

    fn add(self, other: Amount) -> Amount {
        match (self, other) {
            (Amount::Symbolic, x) | (x, Amount::Symbolic) => x,
            (Amount::Exact(a), Amount::Exact(b)) => Amount::Exact(a + b),
            (a, b) => Amount::Approx(a.as_f64() + b.as_f64()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Selection,
    CoresetTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub label: String,
    pub formula: String,
    pub stage: Stage,
    pub flops: Amount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub terms: Vec<Term>,
    pub total: Amount,
    pub notes: Vec<String>,
}

impl CostReport {
    pub fn total_flops(&self) -> f64 {
        self.total.as_f64()
    }

    /// Sum of the selection-stage terms.
    pub fn selection_flops(&self) -> f64 {
        self.stage_total(Stage::Selection).as_f64()
    }

    pub fn stage_total(&self, stage: Stage) -> Amount {
        self.terms
            .iter()
            .filter(|t| t.stage == stage)
            .fold(Amount::Exact(0), |acc, t| acc.add(t.flops))
    }
}

fn mul(factors: &[u128], what: &'static str) -> Result<u128> {
    factors
        .iter()
        .try_fold(1u128, |acc, &x| acc.checked_mul(x))
        .ok_or(CostError::Overflow(what))
}

struct Builder {
    terms: Vec<Term>,
}

impl Builder {
    fn exact(&mut self, label: &str, formula: &str, stage: Stage, factors: &[u128]) -> Result<()> {
        let v = mul(factors, "compute term")?;
        self.push(label, formula, stage, Amount::Exact(v));
        Ok(())
    }

    fn symbolic(&mut self, label: &str, formula: &str) {
        self.push(label, formula, Stage::Selection, Amount::Symbolic);
    }

    fn push(&mut self, label: &str, formula: &str, stage: Stage, flops: Amount) {
        self.terms.push(Term {
            label: label.to_string(),
            formula: formula.to_string(),
            stage,
            flops,
        });
    }

    fn train_proxy(&mut self, p: &ScenarioParams, label: &str) -> Result<()> {
        self.exact(label, "3 N T_proxy f", Stage::Selection, &[3, p.n()?, p.t_proxy()?, p.f()?])
    }

    fn encode(&mut self, p: &ScenarioParams) -> Result<()> {
        self.exact("feature extraction", "N f", Stage::Selection, &[p.n()?, p.f()?])
    }

    fn train_large(&mut self, p: &ScenarioParams, epochs: u128, formula: &str) -> Result<()> {
        self.exact(
            "train large on coreset",
            formula,
            Stage::CoresetTraining,
            &[3, p.k()?, epochs, p.f_large()?],
        )
    }
}

/// End-to-end compute for `method` under `p`.
pub fn compute_cost(method: Method, p: &ScenarioParams) -> Result<CostReport> {
    let mut b = Builder { terms: Vec::new() };
    let mut notes = Vec::new();
    let sel = Stage::Selection;
    match method {
        Method::Herding => {
            b.train_proxy(p, "train proxy")?;
            b.encode(p)?;
            b.symbolic("iterative herding updates", "O(N d k)");
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::Forgetting => {
            b.exact(
                "collect forgetting on full data",
                "3 N T_early f_large",
                sel,
                &[3, p.n()?, p.t_early()?, p.f_large()?],
            )?;
            b.train_large(p, p.t_late()?, "3 k T_late f_large")?;
        }
        Method::Aum | Method::DynUnc => {
            b.train_proxy(p, "train proxy with logging")?;
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::Cal => {
            b.exact("train proxy", "3 k T_proxy f", sel, &[3, p.k()?, p.t_proxy()?, p.f()?])?;
            b.exact("encode unlabeled pool", "U f", sel, &[p.unlabeled()?, p.f()?])?;
            b.symbolic("kNN over features", "O(U k d)");
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::El2n | Method::GraNd => {
            let r = ScenarioParams::req(p.repeats, "R")?;
            let early = [3, p.n()?, p.t_early()?, r, p.f_large()?];
            b.exact("early training", "3 N T_early R f_large", sel, &early)?;
            if method == Method::GraNd {
                b.exact("extra per-sample gradient sweeps", "3 N T_early R f_large", sel, &early)?;
            }
            b.train_large(p, p.t_late()?, "3 k T_late f_large")?;
        }
        Method::Moderate => {
            b.train_proxy(p, "train proxy")?;
            b.encode(p)?;
            b.symbolic("class centers, distances, medians", "O(N d + N log N)");
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::D2Pruning => {
            b.train_proxy(p, "train proxy")?;
            b.encode(p)?;
            b.symbolic("graph build and message passing", "O(N k d) + O(H N k)");
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::Craig => {
            b.train_proxy(p, "train proxy (embeddings piggyback)")?;
            b.symbolic("stochastic greedy over anchors", "O(A (N k + N log(1/eps)) (F + c))");
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::Glister => {
            let gamma = ScenarioParams::req(p.reselect_interval, "gamma")?;
            let eps = p.epsilon.ok_or(CostError::MissingParam("epsilon"))?;
            let (k, q, n, t, fl) = (p.k()?, p.q()?, p.n()?, p.t()?, p.f_large()?);
            let per_round = k as f64 * q as f64 + n as f64 * (1.0 / eps).ln();
            let sel_flops = t as f64 / gamma as f64 * per_round * fl as f64;
            b.push(
                "greedy reselection",
                "(T / gamma) (k Q + N ln(1/eps)) f_large",
                sel,
                Amount::Approx(sel_flops),
            );
            b.train_large(p, t, "3 k T f_large")?;
            notes.push(
                "selection term is evaluated from its big-O expression with unit constant, as in the worked example"
                    .to_string(),
            );
        }
        Method::GraphCut => {
            b.train_proxy(p, "train proxy")?;
            b.encode(p)?;
            b.symbolic("greedy selection", "O(N^2 k)");
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::SloCurv => {
            let r = ScenarioParams::req(p.repeats, "R")?;
            b.train_proxy(p, "train proxy")?;
            b.exact(
                "curvature scoring at end of proxy training",
                "3 N (R + 1) f",
                sel,
                &[3, p.n()?, r + 1, p.f()?],
            )?;
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::Tdds => {
            b.train_proxy(p, "train proxy")?;
            b.exact(
                "per-sample gradient sweeps",
                "3 N T_proxy f",
                sel,
                &[3, p.n()?, p.t_proxy()?, p.f()?],
            )?;
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::Dual => {
            let te = ScenarioParams::req(p.t_proxy_early, "T_proxy_early")?;
            b.exact("early proxy scoring", "3 N T_proxy_early f", sel, &[3, p.n()?, te, p.f()?])?;
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::BoundarySetCcs => {
            let kbar = ScenarioParams::req(p.pgd_steps, "K_bar")?;
            b.train_proxy(p, "train proxy")?;
            b.exact("PGD distance-to-boundary sweeps", "3 N K_bar f", sel, &[3, p.n()?, kbar, p.f()?])?;
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
        Method::Cld => {
            b.train_proxy(p, "train proxy")?;
            b.exact("query loss collection", "Q T_proxy f", sel, &[p.q()?, p.t_proxy()?, p.f()?])?;
            b.train_large(p, p.t()?, "3 k T f_large")?;
        }
    }
    let total = b.terms.iter().fold(Amount::Exact(0), |acc, t| acc.add(t.flops));
    if b.terms.iter().any(|t| t.flops == Amount::Symbolic) {
        notes.push("big-O terms are listed but excluded from the total".to_string());
    }
    Ok(CostReport {
        method,
        terms: b.terms,
        total,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageItem {
    pub label: String,
    pub formula: String,
    pub bytes: u128,
}

/// Selection-stage storage with 4-byte scalars. The first item is the
/// headline figure; GraphCut also lists the half-kernel variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub method: Method,
    pub items: Vec<StorageItem>,
}

impl StorageReport {
    pub fn bytes(&self) -> u128 {
        self.items[0].bytes
    }
}

pub const BYTES_PER_SCALAR: u128 = 4;

pub fn storage_overhead(method: Method, p: &ScenarioParams) -> Result<StorageReport> {
    let item = |label: &str, formula: &str, factors: &[u128]| -> Result<StorageItem> {
        Ok(StorageItem {
            label: label.to_string(),
            formula: formula.to_string(),
            bytes: mul(factors, "storage")? * BYTES_PER_SCALAR,
        })
    };
    let d = || ScenarioParams::req(p.d, "d");
    let items = match method {
        Method::Herding | Method::Moderate | Method::D2Pruning => {
            vec![item("features", "N d x 4", &[p.n()?, d()?])?]
        }
        Method::Cal => vec![item("unlabeled pool features", "U d x 4", &[p.unlabeled()?, d()?])?],
        Method::Forgetting | Method::Aum | Method::GraNd | Method::El2n | Method::BoundarySetCcs => {
            vec![item("per-sample scalars", "N x 4", &[p.n()?])?]
        }
        Method::Craig => {
            let fd = ScenarioParams::req(p.feature_dim, "F")?;
            let c = ScenarioParams::req(p.c, "c")?;
            vec![item("gradient embeddings", "N (F + c) x 4", &[p.n()?, fd + c])?]
        }
        Method::Glister => vec![item("validation cache", "Q x 4", &[p.q()?])?],
        Method::GraphCut => {
            let n = p.n()?;
            vec![
                item("full similarity kernel", "N^2 x 4", &[n, n])?,
                item("half similarity kernel", "N (N - 1) / 2 x 4", &[mul(&[n, n.saturating_sub(1)], "storage")? / 2])?,
            ]
        }
        Method::SloCurv => {
            let r = ScenarioParams::req(p.repeats, "R")?;
            let (n, dd) = (p.n()?, d()?);
            vec![StorageItem {
                label: "running stats and probe directions".into(),
                formula: "N x 4 + R d x 4".into(),
                bytes: (n + mul(&[r, dd], "storage")?) * BYTES_PER_SCALAR,
            }]
        }
        Method::Tdds | Method::DynUnc | Method::Dual => {
            let j = ScenarioParams::req(p.window, "J")?;
            vec![item("windowed logs", "N J x 4", &[p.n()?, j])?]
        }
        Method::Cld => vec![item("loss logs", "(N + Q) T_proxy x 4", &[p.n()? + p.q()?, p.t_proxy()?])?],
    };
    Ok(StorageReport { method, items })
}

/// Display divisor for FLOP counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Unit {
    Flops,
    #[default]
    Peta,
    Exa,
}

impl Unit {
    pub fn divisor(self) -> f64 {
        match self {
            Unit::Flops => 1.0,
            Unit::Peta => 1e15,
            Unit::Exa => 1e18,
        }
    }

    pub fn scale(self, flops: f64) -> f64 {
        flops / self.divisor()
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Flops => "flops",
            Unit::Peta => "1e15",
            Unit::Exa => "1e18",
        })
    }
}

impl FromStr for Unit {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flops" | "1" => Ok(Unit::Flops),
            "1e15" | "pflops" | "peta" => Ok(Unit::Peta),
            "1e18" | "eflops" | "exa" => Ok(Unit::Exa),
            _ => Err(CostError::UnknownUnit(s.to_string())),
        }
    }
}

/// Bytes in decimal gigabytes.
pub fn gigabytes(bytes: u128) -> f64 {
    bytes as f64 / 1e9
}
