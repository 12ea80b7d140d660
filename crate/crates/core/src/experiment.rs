//! JSON experiment specs and the file-backed runner behind the CLI.
//!
//! A spec names one experiment kind and the blocks it needs:
//!
//! ```json
//! {
//!   "kind": "completion",
//!   "seed": 0,
//!   "problem": {"d": 40, "r_true": 2, "n": 320},
//!   "solver": {"eta": 0.01, "iters": 200000, "init_scale": 0.01}
//! }
//! ```
//!
//! Every run is deterministic given the spec. Output files carry no
//! timestamps or paths, so two runs of one spec can be diffed byte for byte.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linops::{MeasurementOp, Vector};
use crate::problem;
use crate::solver::{self, MeasurementScaling, RunStatus, SolverConfig, SolverKind};
use crate::spectra;
use crate::udv::{self, Keep, RegressionDataset, TrainConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Kind {
    #[serde(rename = "completion")]
    Completion,
    #[serde(rename = "completion-noisy")]
    CompletionNoisy,
    #[serde(rename = "phase")]
    Phase,
    #[serde(rename = "udv-train")]
    UdvTrain,
    #[serde(rename = "udv-prune")]
    UdvPrune,
    #[serde(rename = "sweep")]
    Sweep,
}

impl Kind {
    const ALL: [Kind; 6] = [Kind::Completion, Kind::CompletionNoisy, Kind::Phase, Kind::UdvTrain, Kind::UdvPrune, Kind::Sweep];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Completion => "completion",
            Kind::CompletionNoisy => "completion-noisy",
            Kind::Phase => "phase",
            Kind::UdvTrain => "udv-train",
            Kind::UdvPrune => "udv-prune",
            Kind::Sweep => "sweep",
        }
    }

    fn parse(s: &str) -> Option<Kind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn is_matrix(self) -> bool {
        matches!(self, Kind::Completion | Kind::CompletionNoisy | Kind::Phase)
    }

    fn is_network(self) -> bool {
        matches!(self, Kind::UdvTrain | Kind::UdvPrune)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Problem {
    Completion {
        d: usize,
        r_true: usize,
        n: usize,
        noise_rel: f64,
    },
    Phase {
        d: usize,
        oversample: f64,
        /// Signal loaded from `signal_csv`, if given.
        signal: Option<Vec<f64>>,
    },
    Regression {
        n: usize,
        d: usize,
        c: usize,
        r_gen: usize,
        noise: f64,
        gain: f64,
        train_frac: f64,
    },
    RegressionFile {
        path: String,
        train_frac: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Fixed(f64),
    /// `η = 1/L` with `L` estimated by power iteration on `A*A`.
    InverseSmoothness,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverBlock {
    pub solvers: Vec<SolverKind>,
    pub eta: StepRule,
    pub iters: usize,
    pub init_scale: f64,
    pub rank: usize,
    pub alpha: f64,
    pub d0: Option<Vec<f64>>,
    pub log_every: usize,
    pub top_k: usize,
    pub measurement_scaling: MeasurementScaling,
    pub rank_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainBlock {
    pub variants: Vec<Variant>,
    pub hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_std: f64,
    pub top_k: usize,
    /// Test loss is also reported averaged over this many final epochs.
    pub avg_last: usize,
    pub rank_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneBlock {
    pub keep: Keep,
    /// Prune every other variant to the width this variant retains.
    pub match_width_of: Option<Variant>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Eta,
    InitScale,
    Lr,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Eta => "eta",
            Axis::InitScale => "init_scale",
            Axis::Lr => "lr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepBlock {
    pub base: Kind,
    pub axis: Axis,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub kind: Kind,
    pub seed: u64,
    /// Not part of the spec hash.
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub problem: Problem,
    pub solver: Option<SolverBlock>,
    pub train: Option<TrainBlock>,
    pub prune: Option<PruneBlock>,
    pub sweep: Option<SweepBlock>,
}

impl ExperimentSpec {
    /// SHA-256 of the normalized spec (defaults filled, output directory
    /// excluded).
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    /// The kind whose runner does the work: `sweep.base` for sweeps.
    pub fn effective_kind(&self) -> Kind {
        self.sweep.as_ref().map_or(self.kind, |s| s.base)
    }

    /// Overrides the iteration budget (solver iterations or training epochs).
    pub fn set_iters(&mut self, iters: usize) {
        if let Some(s) = &mut self.solver {
            s.iters = iters;
        }
        if let Some(t) = &mut self.train {
            t.epochs = iters;
        }
    }

    /// Normalized spec as JSON, for `validate` output.
    pub fn to_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("spec serializes");
        v["output_dir"] = json!(self.output_dir.display().to_string());
        v
    }
}

/// Reads fields from one JSON object, recording problems instead of stopping
/// at the first.
struct Fields<'a> {
    path: &'static str,
    map: Option<&'a Map<String, Value>>,
    seen: Vec<&'static str>,
}

impl<'a> Fields<'a> {
    fn new(path: &'static str, v: Option<&'a Value>, errs: &mut Vec<String>) -> Self {
        let map = match v {
            None | Some(Value::Null) => None,
            Some(Value::Object(m)) => Some(m),
            Some(_) => {
                errs.push(format!("{path} must be an object"));
                None
            }
        };
        Fields { path, map, seen: Vec::new() }
    }

    fn present(&self) -> bool {
        self.map.is_some()
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.seen.push(key);
        self.map.and_then(|m| m.get(key)).filter(|v| !v.is_null())
    }

    fn has(&self, key: &str) -> bool {
        self.map.is_some_and(|m| m.get(key).is_some_and(|v| !v.is_null()))
    }

    fn missing(&self, key: &str, errs: &mut Vec<String>) {
        errs.push(format!("{}.{key} is required", self.path));
    }

    fn f64(&mut self, key: &'static str, default: Option<f64>, errs: &mut Vec<String>) -> f64 {
        match self.raw(key) {
            Some(v) => v.as_f64().unwrap_or_else(|| {
                errs.push(format!("{}.{key} must be a number", self.path));
                f64::NAN
            }),
            None => default.unwrap_or_else(|| {
                self.missing(key, errs);
                f64::NAN
            }),
        }
    }

    fn usize(&mut self, key: &'static str, default: Option<usize>, errs: &mut Vec<String>) -> usize {
        match self.raw(key) {
            Some(v) => match v.as_u64() {
                Some(x) => x as usize,
                None => {
                    // Accept integral floats such as 2e5.
                    match v.as_f64() {
                        Some(f) if f >= 0.0 && f.fract() == 0.0 && f < 1e15 => f as usize,
                        _ => {
                            errs.push(format!("{}.{key} must be a nonnegative integer", self.path));
                            0
                        }
                    }
                }
            },
            None => default.unwrap_or_else(|| {
                self.missing(key, errs);
                0
            }),
        }
    }

    fn str(&mut self, key: &'static str, errs: &mut Vec<String>) -> Option<&'a str> {
        let v = self.raw(key)?;
        let s = v.as_str();
        if s.is_none() {
            errs.push(format!("{}.{key} must be a string", self.path));
        }
        s
    }

    fn f64_list(&mut self, key: &'static str, errs: &mut Vec<String>) -> Option<Vec<f64>> {
        let v = self.raw(key)?;
        match v.as_array().and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>()) {
            Some(xs) => Some(xs),
            None => {
                errs.push(format!("{}.{key} must be a list of numbers", self.path));
                None
            }
        }
    }

    fn str_list(&mut self, key: &'static str, errs: &mut Vec<String>) -> Option<Vec<&'a str>> {
        let v = self.raw(key)?;
        match v.as_array().and_then(|a| a.iter().map(Value::as_str).collect::<Option<Vec<_>>>()) {
            Some(xs) => Some(xs),
            None => {
                errs.push(format!("{}.{key} must be a list of strings", self.path));
                None
            }
        }
    }

    /// Reports keys that were never read.
    fn finish(self, errs: &mut Vec<String>) {
        if let Some(m) = self.map {
            for k in m.keys() {
                if !self.seen.contains(&k.as_str()) {
                    errs.push(format!("unknown key \"{k}\" in {}", self.path));
                }
            }
        }
    }
}

fn positive(errs: &mut Vec<String>, name: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errs.push(format!("{name} must be > 0"));
    }
}

/// Parses and checks a spec, returning every violation found.
pub fn validate_spec(raw: &str) -> std::result::Result<ExperimentSpec, Vec<String>> {
    let root: Value = serde_json::from_str(raw).map_err(|e| vec![format!("malformed JSON: {e}")])?;
    let mut errs = Vec::new();
    let mut top = Fields::new("spec", Some(&root), &mut errs);
    if !top.present() {
        return Err(errs);
    }
    let kind = match top.str("kind", &mut errs) {
        Some(k) => Kind::parse(k).or_else(|| {
            errs.push(format!("unknown kind \"{k}\"; expected one of completion, completion-noisy, phase, udv-train, udv-prune, sweep"));
            None
        }),
        None => {
            if !top.has("kind") {
                top.missing("kind", &mut errs);
            }
            None
        }
    };
    let seed = top.usize("seed", Some(0), &mut errs) as u64;
    let output_dir = PathBuf::from(top.str("output_dir", &mut errs).unwrap_or(""));

    let sweep = parse_sweep(top.raw("sweep"), kind, &mut errs);
    let base = match (kind, &sweep) {
        (Some(Kind::Sweep), Some(s)) => Some(s.base),
        (Some(Kind::Sweep), None) => None,
        (k, _) => k,
    };

    let problem = parse_problem(top.raw("problem"), base, &mut errs);
    let solver_raw = top.raw("solver");
    let train_raw = top.raw("train");
    let prune_raw = top.raw("prune");
    top.finish(&mut errs);

    let dim = match &problem {
        Some(Problem::Completion { d, .. }) | Some(Problem::Phase { d, .. }) => Some(*d),
        _ => None,
    };
    let (ddim, cdim) = match &problem {
        Some(Problem::Regression { d, c, .. }) => (Some(*d), Some(*c)),
        _ => (None, None),
    };

    let solver = match base {
        Some(k) if k.is_matrix() => {
            let eta_swept = sweep.as_ref().is_some_and(|s| s.axis == Axis::Eta);
            parse_solver(solver_raw, k, dim, eta_swept, &mut errs)
        }
        _ => {
            if solver_raw.is_some() {
                errs.push("solver block only applies to matrix experiments".into());
            }
            None
        }
    };
    let train = match base {
        Some(k) if k.is_network() => parse_train(train_raw, ddim, cdim, &mut errs),
        _ => {
            if train_raw.is_some() {
                errs.push("train block only applies to network experiments".into());
            }
            None
        }
    };
    let prune = match base {
        Some(Kind::UdvPrune) => parse_prune(prune_raw, train.as_ref(), &mut errs),
        _ => {
            if prune_raw.is_some() {
                errs.push("prune block only applies to udv-prune".into());
            }
            None
        }
    };

    if let (Some(s), Some(b)) = (&sweep, base) {
        let ok = match s.axis {
            Axis::Eta | Axis::InitScale => b.is_matrix(),
            Axis::Lr => b.is_network(),
        };
        if !ok {
            errs.push(format!("sweep axis {} does not apply to {}", s.axis.name(), b.name()));
        }
    }

    if !errs.is_empty() {
        return Err(errs);
    }
    let kind = kind.expect("kind checked");
    let output_dir = if output_dir.as_os_str().is_empty() { PathBuf::from("out").join(kind.name()) } else { output_dir };
    Ok(ExperimentSpec { kind, seed, output_dir, problem: problem.expect("problem checked"), solver, train, prune, sweep })
}

fn parse_sweep(v: Option<&Value>, kind: Option<Kind>, errs: &mut Vec<String>) -> Option<SweepBlock> {
    let is_sweep = kind == Some(Kind::Sweep);
    if !is_sweep {
        if v.is_some() {
            errs.push("sweep block requires kind \"sweep\"".into());
        }
        return None;
    }
    let Some(v) = v else {
        errs.push("spec.sweep is required for kind sweep".into());
        return None;
    };
    let mut f = Fields::new("sweep", Some(v), errs);
    let base = match f.str("base", errs) {
        Some(b) => match Kind::parse(b) {
            Some(Kind::Sweep) | None => {
                errs.push(format!("sweep.base \"{b}\" must be a non-sweep kind"));
                None
            }
            k => k,
        },
        None => {
            f.missing("base", errs);
            None
        }
    };
    let axis = match f.str("axis", errs) {
        Some("eta") => Some(Axis::Eta),
        Some("init_scale") | Some("xi") => Some(Axis::InitScale),
        Some("lr") => Some(Axis::Lr),
        Some(a) => {
            errs.push(format!("sweep.axis \"{a}\" must be eta, init_scale or lr"));
            None
        }
        None => {
            f.missing("axis", errs);
            None
        }
    };
    let values = f.f64_list("values", errs).unwrap_or_default();
    if values.is_empty() {
        errs.push("sweep.values must be a non-empty list".into());
    }
    for &x in &values {
        positive(errs, "sweep value", x);
    }
    f.finish(errs);
    Some(SweepBlock { base: base?, axis: axis?, values })
}

fn parse_problem(v: Option<&Value>, kind: Option<Kind>, errs: &mut Vec<String>) -> Option<Problem> {
    let mut f = Fields::new("problem", v, errs);
    if !f.present() {
        errs.push("spec.problem is required".into());
        return None;
    }
    let p = match kind? {
        Kind::Completion | Kind::CompletionNoisy => {
            let noisy = kind == Some(Kind::CompletionNoisy);
            let d = f.usize("d", None, errs);
            let r_true = f.usize("r_true", None, errs);
            let n = f.usize("n", None, errs);
            let noise_rel = f.f64("noise_rel", Some(if noisy { 1e-2 } else { 0.0 }), errs);
            if d < 1 {
                errs.push("problem.d must be >= 1".into());
            }
            if r_true < 1 || r_true > d {
                errs.push("problem.r_true must be in [1, d]".into());
            }
            if n < 1 || n > d * d {
                errs.push("problem.n must be in [1, d^2]".into());
            }
            if !(noise_rel >= 0.0) {
                errs.push("problem.noise_rel must be >= 0".into());
            }
            if !noisy && noise_rel != 0.0 {
                errs.push("problem.noise_rel must be 0 for kind completion; use completion-noisy".into());
            }
            Problem::Completion { d, r_true, n, noise_rel }
        }
        Kind::Phase => {
            let d = f.usize("d", None, errs);
            let oversample = f.f64("oversample", Some(2.0), errs);
            positive(errs, "problem.oversample", oversample);
            let signal = match f.str("signal_csv", errs) {
                Some(path) => match std::fs::read_to_string(path).map_err(Error::from).and_then(|t| problem::load_signal_csv(&t)) {
                    Ok(s) => {
                        if s.len() != d {
                            errs.push(format!("signal file {path} holds {} values, problem.d is {d}", s.len()));
                        }
                        Some(s)
                    }
                    Err(e) => {
                        errs.push(format!("problem.signal_csv {path}: {e}"));
                        None
                    }
                },
                None => None,
            };
            if d < 1 {
                errs.push("problem.d must be >= 1".into());
            }
            Problem::Phase { d, oversample, signal }
        }
        Kind::UdvTrain | Kind::UdvPrune => {
            let train_frac = f.f64("train_frac", Some(0.8), errs);
            if !(train_frac > 0.0 && train_frac < 1.0) {
                errs.push("problem.train_frac must be in (0, 1)".into());
            }
            if let Some(path) = f.str("dataset_csv", errs) {
                for k in ["n", "d", "c", "r_gen", "noise", "gain"] {
                    if f.has(k) {
                        errs.push(format!("problem.{k} conflicts with problem.dataset_csv"));
                    }
                }
                let path = path.to_string();
                f.seen.extend(["n", "d", "c", "r_gen", "noise", "gain"]);
                f.finish(errs);
                return Some(Problem::RegressionFile { path, train_frac });
            }
            let n = f.usize("n", None, errs);
            let d = f.usize("d", None, errs);
            let c = f.usize("c", None, errs);
            let r_gen = f.usize("r_gen", None, errs);
            let noise = f.f64("noise", Some(0.01), errs);
            let gain = f.f64("gain", Some(1.0), errs);
            if n < 2 {
                errs.push("problem.n must be >= 2".into());
            }
            if d < 1 || c < 1 {
                errs.push("problem.d and problem.c must be >= 1".into());
            }
            if r_gen < 1 || r_gen > d.min(c) {
                errs.push("problem.r_gen must be in [1, min(d, c)]".into());
            }
            if !(noise >= 0.0) {
                errs.push("problem.noise must be >= 0".into());
            }
            positive(errs, "problem.gain", gain);
            Problem::Regression { n, d, c, r_gen, noise, gain, train_frac }
        }
        Kind::Sweep => return None,
    };
    f.finish(errs);
    Some(p)
}

fn parse_solver(v: Option<&Value>, kind: Kind, dim: Option<usize>, eta_swept: bool, errs: &mut Vec<String>) -> Option<SolverBlock> {
    let mut f = Fields::new("solver", v, errs);
    if !f.present() {
        errs.push("spec.solver is required".into());
        return None;
    }
    let phase = kind == Kind::Phase;
    let solvers = match f.str_list("solvers", errs) {
        Some(xs) => xs
            .iter()
            .filter_map(|s| match *s {
                "udu" => Some(SolverKind::Udu),
                "bm" => Some(SolverKind::Bm),
                other => {
                    errs.push(format!("solver.solvers entry \"{other}\" must be udu or bm"));
                    None
                }
            })
            .collect(),
        None => vec![SolverKind::Udu, SolverKind::Bm],
    };
    if solvers.is_empty() {
        errs.push("solver.solvers must not be empty".into());
    }
    let eta = match f.raw("eta") {
        Some(Value::String(s)) if s == "1/L" => StepRule::InverseSmoothness,
        Some(Value::String(s)) => {
            errs.push(format!("solver.eta \"{s}\" must be a number or \"1/L\""));
            StepRule::InverseSmoothness
        }
        Some(v) => {
            let x = v.as_f64().unwrap_or(f64::NAN);
            if !(x > 0.0 && x.is_finite()) {
                errs.push("eta must be > 0".into());
            }
            StepRule::Fixed(x)
        }
        None if phase => StepRule::InverseSmoothness,
        // Each sweep point overrides it.
        None if eta_swept => StepRule::Fixed(1.0),
        None => {
            f.missing("eta", errs);
            StepRule::Fixed(f64::NAN)
        }
    };
    let iters = f.usize("iters", None, errs);
    let init_scale = f.f64("init_scale", Some(if phase { 1.0 } else { 1e-2 }), errs);
    positive(errs, "init_scale", init_scale);
    let rank = f.usize("rank", dim, errs);
    if let Some(d) = dim {
        if rank < 1 || rank > d {
            errs.push(format!("solver.rank must be in [1, {d}]"));
        }
    }
    let alpha = f.f64("alpha", Some(1.0), errs);
    positive(errs, "alpha", alpha);
    let d0 = f.f64_list("d0", errs);
    if let Some(d0) = &d0 {
        if d0.len() != rank {
            errs.push(format!("solver.d0 has {} entries, rank is {rank}", d0.len()));
        }
        if d0.iter().any(|&x| !(x >= 0.0)) {
            errs.push("solver.d0 entries must be >= 0".into());
        }
    }
    let log_every = f.usize("log_every", Some(1000), errs);
    if log_every < 1 {
        errs.push("solver.log_every must be >= 1".into());
    }
    let top_k = f.usize("top_k", Some(10), errs);
    let measurement_scaling = match f.raw("measurement_scaling") {
        None => {
            if phase {
                MeasurementScaling::None
            } else {
                MeasurementScaling::MaxAbs
            }
        }
        Some(Value::String(s)) if s == "none" => MeasurementScaling::None,
        Some(Value::String(s)) if s == "max_abs" => MeasurementScaling::MaxAbs,
        Some(v) => match v.as_f64() {
            Some(x) if x > 0.0 && x.is_finite() => MeasurementScaling::Fixed(x),
            _ => {
                errs.push("solver.measurement_scaling must be \"none\", \"max_abs\" or a positive number".into());
                MeasurementScaling::None
            }
        },
    };
    let rank_tol = f.f64("rank_tol", Some(if phase { 1e-4 } else { 1e-6 }), errs);
    positive(errs, "solver.rank_tol", rank_tol);
    f.finish(errs);
    Some(SolverBlock { solvers, eta, iters, init_scale, rank, alpha, d0, log_every, top_k, measurement_scaling, rank_tol })
}

fn parse_train(v: Option<&Value>, d: Option<usize>, c: Option<usize>, errs: &mut Vec<String>) -> Option<TrainBlock> {
    let mut f = Fields::new("train", v, errs);
    if !f.present() {
        errs.push("spec.train is required".into());
        return None;
    }
    let variants = match f.str_list("variants", errs) {
        Some(xs) => xs
            .iter()
            .filter_map(|s| {
                Variant::parse(s).or_else(|| {
                    errs.push(format!("train.variants entry \"{s}\" must be one of udv, udv_s, udv_v1, udv_v2, uv"));
                    None
                })
            })
            .collect(),
        None => vec![Variant::Udv, Variant::Uv],
    };
    if variants.is_empty() {
        errs.push("train.variants must not be empty".into());
    }
    let default_hidden = match (d, c) {
        (Some(d), Some(c)) => Some(udv::hidden_width(d, c)),
        _ => None,
    };
    let hidden = f.usize("hidden", default_hidden, errs);
    if hidden < 1 {
        errs.push("train.hidden must be >= 1".into());
    }
    let lr = f.f64("lr", None, errs);
    positive(errs, "lr", lr);
    let momentum = f.f64("momentum", Some(0.0), errs);
    if !(0.0..1.0).contains(&momentum) {
        errs.push("momentum must be in [0, 1)".into());
    }
    let batch_size = f.usize("batch_size", Some(32), errs);
    if batch_size < 1 {
        errs.push("train.batch_size must be >= 1".into());
    }
    let epochs = f.usize("epochs", None, errs);
    let init_std = f.f64("init_std", Some(0.02), errs);
    positive(errs, "train.init_std", init_std);
    let top_k = f.usize("top_k", Some(10), errs);
    let avg_last = f.usize("avg_last", Some(1), errs);
    if avg_last < 1 {
        errs.push("train.avg_last must be >= 1".into());
    }
    let rank_tol = f.f64("rank_tol", Some(1e-3), errs);
    positive(errs, "train.rank_tol", rank_tol);
    f.finish(errs);
    Some(TrainBlock { variants, hidden, lr, momentum, batch_size, epochs, init_std, top_k, avg_last, rank_tol })
}

fn parse_prune(v: Option<&Value>, train: Option<&TrainBlock>, errs: &mut Vec<String>) -> Option<PruneBlock> {
    let mut f = Fields::new("prune", v, errs);
    if !f.present() {
        return Some(PruneBlock { keep: Keep::Energy(0.999), match_width_of: None });
    }
    let keep = match (f.has("energy"), f.has("rank")) {
        (true, true) => {
            errs.push("prune takes either energy or rank, not both".into());
            Keep::Energy(0.999)
        }
        (false, true) => {
            let r = f.usize("rank", None, errs);
            if let Some(t) = train {
                if r < 1 || r > t.hidden {
                    errs.push(format!("prune.rank must be in [1, {}]", t.hidden));
                }
            }
            Keep::Rank(r)
        }
        _ => {
            let e = f.f64("energy", Some(0.999), errs);
            if !(e > 0.0 && e <= 1.0) {
                errs.push("prune.energy must be in (0, 1]".into());
            }
            Keep::Energy(e)
        }
    };
    f.seen.extend(["energy", "rank"]);
    let match_width_of = f.str("match_width_of", errs).and_then(|s| {
        let v = Variant::parse(s);
        match (v, train) {
            (None, _) => errs.push(format!("prune.match_width_of \"{s}\" is not a variant")),
            (Some(v), Some(t)) if !t.variants.contains(&v) => {
                errs.push(format!("prune.match_width_of \"{s}\" is not among train.variants"))
            }
            _ => {}
        }
        v
    });
    f.finish(errs);
    Some(PruneBlock { keep, match_width_of })
}

/// Worker count from `UDUFACT_THREADS`, else the machine's parallelism.
pub fn default_threads() -> usize {
    std::env::var("UDUFACT_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on up to `threads` workers, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every item mapped")).collect()
}

/// Summary of a finished experiment. `exit_code` follows the CLI contract:
/// 0 ran (divergence included), 2 a solver hit a non-finite gradient.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: Value,
    pub exit_code: i32,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_json(dir: &Path, name: &str, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write(dir, name, &s)
}

/// Runs the spec, writing all artifacts under `spec.output_dir`.
pub fn run_experiment(spec: &ExperimentSpec, threads: usize) -> Result<Outcome> {
    std::fs::create_dir_all(&spec.output_dir)?;
    let hash = spec.hash();
    let outcome = match &spec.sweep {
        Some(sw) => run_sweep(spec, sw, threads)?,
        None => run_single(spec, threads)?,
    };
    let mut summary = json!({
        "spec_hash": hash,
        "version": env!("CARGO_PKG_VERSION"),
        "kind": spec.kind.name(),
        "seed": spec.seed,
    });
    if let (Value::Object(dst), Value::Object(src)) = (&mut summary, outcome.summary) {
        dst.extend(src);
    }
    write_json(&spec.output_dir, "summary.json", &summary)?;
    Ok(Outcome { summary, exit_code: outcome.exit_code })
}

fn run_single(spec: &ExperimentSpec, threads: usize) -> Result<Outcome> {
    match spec.kind {
        Kind::Completion | Kind::CompletionNoisy | Kind::Phase => run_matrix(spec, threads),
        Kind::UdvTrain | Kind::UdvPrune => run_network(spec, threads),
        Kind::Sweep => Err(Error::Spec(vec!["sweep spec without sweep block".into()])),
    }
}

fn axis_label(axis: Axis, v: f64) -> String {
    format!("{}={v:e}", axis.name())
}

fn run_sweep(spec: &ExperimentSpec, sw: &SweepBlock, threads: usize) -> Result<Outcome> {
    let points: Vec<ExperimentSpec> = sw
        .values
        .iter()
        .map(|&v| {
            let mut p = spec.clone();
            p.kind = sw.base;
            p.sweep = None;
            p.output_dir = spec.output_dir.join(axis_label(sw.axis, v));
            match sw.axis {
                Axis::Eta => p.solver.as_mut().expect("validated").eta = StepRule::Fixed(v),
                Axis::InitScale => p.solver.as_mut().expect("validated").init_scale = v,
                Axis::Lr => p.train.as_mut().expect("validated").lr = v,
            }
            p
        })
        .collect();
    let results = parallel_map(&points, threads, |p| run_experiment(p, 1));
    let mut out = Vec::new();
    let mut code = 0;
    for ((p, &v), r) in points.iter().zip(&sw.values).zip(results) {
        let r = r?;
        code = code.max(r.exit_code);
        out.push(json!({
            "value": v,
            "dir": p.output_dir.file_name().map(|s| s.to_string_lossy().to_string()),
            "summary": r.summary,
        }));
    }
    Ok(Outcome {
        summary: json!({ "base": sw.base.name(), "axis": sw.axis.name(), "points": out }),
        exit_code: code,
    })
}

enum Instance {
    Completion(problem::CompletionInstance),
    Phase(problem::PhaseInstance),
}

impl Instance {
    fn op(&self) -> &MeasurementOp {
        match self {
            Instance::Completion(c) => &c.op,
            Instance::Phase(p) => &p.op,
        }
    }

    fn b(&self) -> &Vector {
        match self {
            Instance::Completion(c) => &c.b,
            Instance::Phase(p) => &p.b,
        }
    }
}

/// Instance described by a matrix spec. Noise uses seed `seed + 1`.
pub fn build_instance(spec: &ExperimentSpec) -> Result<Value> {
    Ok(match make_instance(spec)? {
        Instance::Completion(c) => serde_json::to_value(c)?,
        Instance::Phase(p) => serde_json::to_value(p)?,
    })
}

fn make_instance(spec: &ExperimentSpec) -> Result<Instance> {
    match &spec.problem {
        Problem::Completion { d, r_true, n, noise_rel } => {
            let mut inst = problem::gen_completion(*d, *r_true, *n, spec.seed)?;
            if *noise_rel > 0.0 {
                inst.b = problem::perturb_noise(&inst.b, *noise_rel, spec.seed.wrapping_add(1))?;
                inst.noise_rel = *noise_rel;
            }
            Ok(Instance::Completion(inst))
        }
        Problem::Phase { d, oversample, signal } => {
            Ok(Instance::Phase(problem::gen_phase_retrieval(*d, *oversample, spec.seed, signal.as_deref())?))
        }
        _ => Err(Error::Spec(vec!["matrix experiment needs a completion or phase problem".into()])),
    }
}

#[derive(Serialize)]
struct MatrixRun {
    solver: SolverKind,
    eta: f64,
    iters: usize,
    iters_run: usize,
    status: RunStatus,
    diverged: bool,
    converged: bool,
    last_displacement: f64,
    scale: f64,
    initial_objective: f64,
    final_objective: f64,
    rank_tol: f64,
    numerical_rank: usize,
    /// `σ_k/σ_1`, k = 1..top_k.
    sv_ratios: Vec<f64>,
    svals: Vec<f64>,
    /// Factor column norms above `1e-3·max`.
    active_columns: usize,
    max_active_cosine: f64,
    /// Frobenius norm of `∇f` at the final iterate, in solver units.
    grad_norm: f64,
    fixed_point: Option<spectra::FixedPointReport>,
    recovery_error: Option<f64>,
    correlation: Option<f64>,
}

fn run_matrix(spec: &ExperimentSpec, threads: usize) -> Result<Outcome> {
    let sb = spec.solver.as_ref().ok_or_else(|| Error::Spec(vec!["missing solver block".into()]))?;
    let inst = make_instance(spec)?;
    let dir = &spec.output_dir;
    match &inst {
        Instance::Completion(c) => write_json(dir, "instance.json", c)?,
        Instance::Phase(p) => write_json(dir, "instance.json", p)?,
    }
    let (op, b) = (inst.op(), inst.b());
    let (eta, smoothness) = match sb.eta {
        StepRule::Fixed(e) => (e, None),
        StepRule::InverseSmoothness => {
            let l = problem::estimate_smoothness(op, 1000, spec.seed)?;
            (1.0 / l, Some(l))
        }
    };
    let runs = parallel_map(&sb.solvers, threads, |&kind| -> Result<MatrixRun> {
        let cfg = SolverConfig {
            solver: kind,
            eta,
            iters: sb.iters,
            init_scale: sb.init_scale,
            seed: spec.seed,
            log_every: sb.log_every,
            rank: sb.rank,
            alpha: sb.alpha,
            d0: sb.d0.clone(),
            scaling: sb.measurement_scaling,
            top_k: sb.top_k,
        };
        let out = solver::run_solver(op, b, &cfg)?;
        let name = match kind {
            SolverKind::Udu => "udu",
            SolverKind::Bm => "bm",
        };
        write(dir, &format!("{name}_trace.csv"), &solver::trace_csv(&out.trace, sb.top_k))?;
        let mut dump = out.state.to_dump();
        dump.scale = out.scale;
        write_json(dir, &format!("{name}_state.json"), &dump)?;

        let x = out.x();
        let finite = x.iter().all(|v| v.is_finite());
        let svals = if finite { spectra::singular_values(&x)? } else { Vec::new() };
        write(dir, &format!("{name}_spectrum.csv"), &spectra::spectrum_csv(&svals))?;
        let (grad_norm, fixed_point) = if finite {
            let (g, rep) = solver::final_report(op, b, &out, eta)?;
            (g.norm(), (kind == SolverKind::Udu).then_some(rep))
        } else {
            (f64::NAN, None)
        };
        let active = spectra::active_columns(&out.state.u, 1e-3);
        let (recovery_error, correlation) = match &inst {
            Instance::Completion(c) => (finite.then(|| problem::relative_error(&x, &c.x_true)), None),
            Instance::Phase(p) => (
                None,
                if finite { Some(problem::correlation(&problem::extract_signal(&x)?, &p.x_signal)) } else { None },
            ),
        };
        Ok(MatrixRun {
            solver: kind,
            eta,
            iters: sb.iters,
            iters_run: out.iters_run,
            status: out.status,
            diverged: out.diverged,
            converged: out.converged(),
            last_displacement: out.last_displacement,
            scale: out.scale,
            initial_objective: out.trace.first().map_or(f64::NAN, |r| r.objective),
            final_objective: out.trace.last().map_or(f64::NAN, |r| r.objective),
            rank_tol: sb.rank_tol,
            numerical_rank: if finite { spectra::numerical_rank(&svals, sb.rank_tol)? } else { 0 },
            sv_ratios: (0..sb.top_k.min(svals.len())).map(|k| spectra::ratio(&svals, k)).collect(),
            svals: svals.iter().take(sb.top_k).copied().collect(),
            active_columns: active.indices.len(),
            max_active_cosine: active.max_cosine,
            grad_norm,
            fixed_point,
            recovery_error,
            correlation,
        })
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let exit_code = if runs.iter().any(|r| matches!(r.status, RunStatus::NonFinite { .. })) { 2 } else { 0 };
    let mut summary = json!({ "runs": runs });
    if let Some(l) = smoothness {
        summary["smoothness"] = json!(l);
    }
    if let Instance::Completion(c) = &inst {
        summary["r_true"] = json!(c.rank());
    }
    Ok(Outcome { summary, exit_code })
}

#[derive(Serialize)]
struct PruneResult {
    retained_width: usize,
    test_loss: f64,
    /// `(pruned − trained)/trained` test loss.
    change_rel: f64,
}

#[derive(Serialize)]
struct NetworkRun {
    variant: Variant,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    epochs: usize,
    hidden: usize,
    diverged: bool,
    train_loss: f64,
    test_loss: f64,
    test_loss_avg: f64,
    max_violation: f64,
    rank_tol: f64,
    numerical_rank: usize,
    sv_ratios: Vec<f64>,
    svals: Vec<f64>,
    prune: Option<PruneResult>,
}

fn run_network(spec: &ExperimentSpec, threads: usize) -> Result<Outcome> {
    let tb = spec.train.as_ref().ok_or_else(|| Error::Spec(vec!["missing train block".into()]))?;
    let ds = match &spec.problem {
        Problem::Regression { n, d, c, r_gen, noise, gain, train_frac } => {
            let mut ds = udv::gen_regression(*n, *d, *c, *r_gen, *noise, *gain, spec.seed)?;
            if *train_frac != 0.8 {
                let (r, nz) = (ds.r_gen, ds.noise);
                ds = RegressionDataset::new(ds.x, ds.y, *train_frac, spec.seed)?;
                ds.r_gen = r;
                ds.noise = nz;
            }
            ds
        }
        Problem::RegressionFile { path, train_frac } => {
            RegressionDataset::from_csv(&std::fs::read_to_string(path)?, *train_frac, spec.seed)?
        }
        _ => return Err(Error::Spec(vec!["network experiment needs a regression problem".into()])),
    };
    let dir = &spec.output_dir;
    write(dir, "dataset.csv", &ds.to_csv()?)?;
    let (xte, yte) = ds.rows(&ds.test);

    let trained = parallel_map(&tb.variants, threads, |&v| -> Result<(udv::TrainOutput, NetworkRun)> {
        let mut cfg = TrainConfig::new(v, tb.hidden, tb.lr, tb.momentum, tb.batch_size, tb.epochs, spec.seed);
        cfg.init_std = tb.init_std;
        cfg.top_k = tb.top_k;
        let out = udv::train(&ds, &cfg)?;
        write(dir, &format!("{v}_trace.csv"), &udv::trace_csv(&out.trace, tb.top_k))?;
        write_json(dir, &format!("{v}_params.json"), &out.params)?;
        let layer = out.params.scaled_input_layer();
        let svals = if layer.iter().all(|x| x.is_finite()) { spectra::singular_values(&layer)? } else { Vec::new() };
        let last = out.trace.last().expect("trace has the initial record");
        let run = NetworkRun {
            variant: v,
            lr: tb.lr,
            momentum: tb.momentum,
            batch_size: tb.batch_size,
            epochs: tb.epochs,
            hidden: tb.hidden,
            diverged: out.diverged,
            train_loss: last.train_loss,
            test_loss: last.test_loss,
            test_loss_avg: out.test_loss_last(tb.avg_last),
            max_violation: out.trace.iter().map(|r| r.violation).fold(0.0, f64::max),
            rank_tol: tb.rank_tol,
            numerical_rank: if svals.is_empty() { 0 } else { spectra::numerical_rank(&svals, tb.rank_tol)? },
            sv_ratios: (0..tb.top_k.min(svals.len())).map(|k| spectra::ratio(&svals, k)).collect(),
            svals: svals.iter().take(tb.top_k).copied().collect(),
            prune: None,
        };
        Ok((out, run))
    });
    let mut trained = trained.into_iter().collect::<Result<Vec<_>>>()?;

    if let (Kind::UdvPrune, Some(pb)) = (spec.kind, &spec.prune) {
        let prune_one = |out: &udv::TrainOutput, run: &NetworkRun, keep: Keep| -> Result<PruneResult> {
            let pruned = udv::svd_prune(&out.params, keep)?;
            write_json(dir, &format!("{}_pruned_params.json", run.variant), &pruned)?;
            let tl = udv::batch_loss(&pruned, &xte, &yte)?;
            Ok(PruneResult { retained_width: pruned.width(), test_loss: tl, change_rel: (tl - run.test_loss) / run.test_loss })
        };
        let matched = match pb.match_width_of {
            Some(v0) => {
                let i = trained.iter().position(|(_, r)| r.variant == v0).expect("validated");
                let res = prune_one(&trained[i].0, &trained[i].1, pb.keep)?;
                let w = res.retained_width;
                trained[i].1.prune = Some(res);
                Some((v0, w))
            }
            None => None,
        };
        for (out, run) in trained.iter_mut() {
            if run.prune.is_some() {
                continue;
            }
            let keep = match matched {
                Some((_, w)) => Keep::Rank(w.min(out.params.width())),
                None => pb.keep,
            };
            run.prune = Some(prune_one(out, run, keep)?);
        }
    }
    let runs: Vec<NetworkRun> = trained.into_iter().map(|(_, r)| r).collect();
    let summary = json!({
        "n_train": ds.train.len(),
        "n_test": ds.test.len(),
        "runs": runs,
    });
    Ok(Outcome { summary, exit_code: 0 })
}
