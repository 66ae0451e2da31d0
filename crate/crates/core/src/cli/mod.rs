//! Command-line harness: dataset generation, solver runs, tuning sweeps and
//! the theory checks, all logged as JSON lines.

pub mod checks;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::classic::PooledGaussConfig;
use crate::error::{Error, Result};
use crate::gf2::BitVector;
use crate::lpn::{self, Dataset, LpnInstance};
use crate::pipelines::{
    self, AbundantOptions, HybridOptions, HyperProfile, LogBase, ModerateOptions, RestrictedOptions, SolveResult,
    Status,
};
use crate::seed::SeedTree;
use crate::train::TracePoint;

pub const VERSION: &str = concat!("lpnkit v", env!("CARGO_PKG_VERSION"));

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "lpnkit", version, about = "Learning Parity with Noise solvers and experiment harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset file and a sidecar key file holding the secret.
    Gen(Opts),
    /// Run one solver and write a JSON-lines run log.
    Solve {
        setting: SolveSetting,
        #[command(flatten)]
        opts: Opts,
    },
    /// Sweep hyperparameter profiles and report the best one.
    Tune {
        setting: TuneSetting,
        #[command(flatten)]
        opts: Opts,
    },
    /// Run a property suite at a fixed seed.
    VerifyTheory {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(checks::CHECKS))]
        check: String,
        #[command(flatten)]
        opts: Opts,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveSetting {
    Abundant,
    Restricted,
    Moderate,
    Gauss,
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneSetting {
    Abundant,
    Restricted,
}

/// Every option is kept as text here; values are parsed after merging with
/// the config file so both sources go through the same validation.
#[derive(Args, Debug, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Opts {
    /// Secret dimension.
    #[arg(long)]
    pub n: Option<String>,
    /// Noise rate in [0, 0.5).
    #[arg(long)]
    pub tau: Option<String>,
    /// Number of samples.
    #[arg(long)]
    pub m: Option<String>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<String>,
    /// Hamming weight of generated secrets (default floor(n * tau)).
    #[arg(long)]
    pub weight: Option<String>,
    /// Hidden layer width.
    #[arg(long)]
    pub width: Option<String>,
    /// Number of hidden layers (1-3).
    #[arg(long)]
    pub depth: Option<String>,
    /// Hidden activation: relu, sigmoid, cos, identity.
    #[arg(long)]
    pub activation: Option<String>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<String>,
    /// Rows per step; 0 uses the whole training set.
    #[arg(long)]
    pub batch: Option<String>,
    /// Weight decay.
    #[arg(long)]
    pub wd: Option<String>,
    /// logistic, mse or mae.
    #[arg(long)]
    pub loss: Option<String>,
    /// adam or sgd.
    #[arg(long)]
    pub opt: Option<String>,
    /// Training limits, e.g. "step:20000" or "time:600,step:5000".
    #[arg(long)]
    pub stop: Option<String>,
    /// Training time cap in seconds.
    #[arg(long)]
    pub time_cap: Option<String>,
    /// Factor applied to the default training time caps.
    #[arg(long)]
    pub time_scale: Option<String>,
    /// Clean accuracy target (abundant) or test-accuracy threshold (restricted).
    #[arg(long)]
    pub gamma: Option<String>,
    /// Hypothesis-test threshold for pooled Gauss.
    #[arg(long)]
    pub tau_prime: Option<String>,
    /// Secret coordinates enumerated by the hybrid solver.
    #[arg(long)]
    pub suffix_bits: Option<String>,
    /// Inner solver of the hybrid setting: gauss or moderate.
    #[arg(long)]
    pub inner: Option<String>,
    /// Rows held out to verify hybrid candidates.
    #[arg(long)]
    pub holdout: Option<String>,
    /// Training restarts (solve) or fresh secrets per profile (tune).
    #[arg(long)]
    pub repeat: Option<String>,
    /// Pooled-Gauss runs on the boosting set.
    #[arg(long)]
    pub repeat_post: Option<String>,
    /// Initializations per guess of the restricted solver.
    #[arg(long)]
    pub inits: Option<String>,
    /// Pool size for pooled Gauss.
    #[arg(long)]
    pub pool: Option<String>,
    /// Iteration cap for pooled Gauss.
    #[arg(long)]
    pub max_iterations: Option<String>,
    /// Logarithm in the restricted threshold: natural or two.
    #[arg(long)]
    pub log_base: Option<String>,
    /// Comma-separated learning rates to tune.
    #[arg(long)]
    pub lrs: Option<String>,
    /// Comma-separated batch sizes to tune.
    #[arg(long)]
    pub batches: Option<String>,
    /// Comma-separated widths to tune.
    #[arg(long)]
    pub widths: Option<String>,
    /// Comma-separated weight decays to tune.
    #[arg(long)]
    pub wds: Option<String>,
    /// Half-log2 exponent range "lo:hi" of the restricted sample grid.
    #[arg(long)]
    pub m_grid: Option<String>,
    /// Dataset file to solve.
    #[arg(long)]
    pub data: Option<String>,
    /// Key file with the secret, used only to report whether it was found.
    #[arg(long)]
    pub key: Option<String>,
    /// Leave the secret out of the generated dataset file.
    #[arg(long)]
    pub public: bool,
    /// Omit wall-clock fields from the run log.
    #[arg(long)]
    pub deterministic: bool,
    /// Output path (dataset for gen, run log otherwise; default stdout).
    #[arg(long)]
    pub out: Option<String>,
    /// Flat key=value file; keys are the long flag names.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Flag values after merging command line over config file.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Settings {
    /// Command-line values take precedence over the config file.
    pub fn resolve(opts: &Opts) -> Result<Self> {
        let mut values = BTreeMap::new();
        let known = opt_values(&Opts::default())?;
        if let Some(path) = &opts.config {
            let text = fs::read_to_string(path)?;
            for (key, value) in parse_config(&text)? {
                if !known.contains_key(&key) {
                    return Err(usage(format!("unknown key {key:?} in {}", path.display())));
                }
                values.insert(key, value);
            }
        }
        for (key, value) in opt_values(opts)? {
            if let Some(v) = value {
                values.insert(key, v);
            }
        }
        Ok(Self { values })
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        Self { values: pairs.into_iter().collect() }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s.trim().parse().map(Some).map_err(|e| usage(format!("--{key} {s:?}: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| usage(format!("--{key} is required here")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|p| p.trim().parse().map_err(|e| usage(format!("--{key} item {p:?}: {e}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn as_json(&self) -> Value {
        json!(self.values)
    }
}

fn opt_values(opts: &Opts) -> Result<BTreeMap<String, Option<String>>> {
    let Value::Object(map) = serde_json::to_value(opts)? else { unreachable!("struct serializes to an object") };
    Ok(map
        .into_iter()
        .map(|(k, v)| {
            let v = match v {
                Value::String(s) => Some(s),
                Value::Bool(true) => Some("true".into()),
                _ => None,
            };
            (k, v)
        })
        .collect())
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| usage(format!("config line {}: expected key=value", i + 1)))?;
        out.push((k.trim().trim_start_matches("--").to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// JSON-lines writer. In deterministic mode wall-clock fields are dropped.
pub struct RunLog {
    out: Box<dyn Write>,
    deterministic: bool,
}

impl RunLog {
    pub fn new(out: Box<dyn Write>, deterministic: bool) -> Self {
        Self { out, deterministic }
    }

    pub fn open(path: Option<&str>, deterministic: bool) -> Result<Self> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
            None => Box::new(io::stdout()),
        };
        Ok(Self::new(out, deterministic))
    }

    pub fn record(&mut self, mut value: Value) -> Result<()> {
        if self.deterministic {
            strip_wall_clock(&mut value);
        }
        serde_json::to_writer(&mut self.out, &value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Removes every `wall_ms` key.
pub fn strip_wall_clock(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.remove("wall_ms");
            map.values_mut().for_each(strip_wall_clock);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}

fn parse_stop(spec: &str, profile: &mut HyperProfile) -> Result<Option<f64>> {
    profile.max_steps = None;
    profile.time_cap_secs = None;
    let mut gamma = None;
    for part in spec.split(',') {
        let (kind, value) =
            part.split_once(':').ok_or_else(|| usage(format!("stop item {part:?}: expected kind:value")))?;
        let bad = |e: &dyn Display| usage(format!("stop item {part:?}: {e}"));
        match kind.trim() {
            "step" => profile.max_steps = Some(value.trim().parse().map_err(|e| bad(&e))?),
            "time" => profile.time_cap_secs = Some(value.trim().parse().map_err(|e| bad(&e))?),
            "acc" => gamma = Some(value.trim().parse().map_err(|e| bad(&e))?),
            other => return Err(usage(format!("unknown stop kind {other:?}; expected step, time or acc"))),
        }
    }
    Ok(gamma)
}

/// Preset for `setting` with every profile flag applied.
pub fn build_profile(base: HyperProfile, s: &Settings) -> Result<(HyperProfile, Option<f64>)> {
    let mut p = base;
    if let Some(scale) = s.get::<f64>("time-scale")? {
        if !(scale > 0.0) {
            return Err(usage("--time-scale must be positive"));
        }
        p.time_cap_secs = p.time_cap_secs.map(|t| t * scale);
    }
    if let Some(v) = s.get("width")? {
        p.width = v;
    }
    if let Some(v) = s.get("depth")? {
        p.depth = v;
    }
    if let Some(v) = s.get("activation")? {
        p.activation = v;
    }
    if let Some(v) = s.get("lr")? {
        p.lr = v;
    }
    if let Some(v) = s.get("batch")? {
        p.batch = v;
    }
    if let Some(v) = s.get("wd")? {
        p.weight_decay = v;
    }
    if let Some(v) = s.get("loss")? {
        p.loss = v;
    }
    if let Some(v) = s.get("opt")? {
        p.optimizer = v;
    }
    let mut stop_gamma = None;
    if let Some(spec) = s.raw("stop") {
        stop_gamma = parse_stop(spec, &mut p)?;
    }
    if let Some(t) = s.get::<f64>("time-cap")? {
        p.time_cap_secs = Some(t);
    }
    p.validate().map_err(|e| usage(e.to_string()))?;
    Ok((p, stop_gamma))
}

fn trace_record(t: &TracePoint) -> Value {
    json!({"record": "trace", "step": t.step, "wall_ms": t.wall_ms, "train_acc": t.train_acc, "test_acc": t.test_acc})
}

fn write_result(log: &mut RunLog, result: &SolveResult, truth: Option<&BitVector>) -> Result<()> {
    for p in &result.phases {
        log.record(json!({"record": "phase", "name": p.name, "wall_ms": p.wall_ms}))?;
    }
    for t in &result.trace {
        log.record(trace_record(t))?;
    }
    let secret_matches = match (truth, &result.secret, result.bits.is_empty()) {
        (Some(t), Some(s), _) => Some(t == s),
        (Some(t), None, false) => Some(result.bits.iter().all(|&(i, b)| i < t.len() && t.get(i) == b)),
        _ => None,
    };
    log.record(json!({
        "record": "result",
        "status": result.status,
        "secret": result.secret.as_ref().map(BitVector::to_hex),
        "bits": result.bits,
        "verification_accuracy": result.verification_accuracy,
        "secret_matches": secret_matches,
        "metrics": result.metrics,
        "wall_ms": result.wall_ms,
        "success": result.is_success(),
    }))
}

fn status_code(status: Status) -> i32 {
    match status {
        Status::Success => EXIT_SUCCESS,
        Status::Failure => EXIT_FAILURE,
        Status::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

fn seed_tree(s: &Settings) -> Result<SeedTree> {
    Ok(SeedTree::new(s.require("seed")?))
}

fn instance(s: &Settings, seeds: &SeedTree) -> Result<LpnInstance> {
    let n: usize = s.require("n")?;
    let tau: f64 = s.require("tau")?;
    lpn::check_noise(tau).map_err(|e| usage(e.to_string()))?;
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let weight = s.get::<usize>("weight")?;
    if weight.is_some_and(|w| w > n) {
        return Err(usage("--weight exceeds --n"));
    }
    LpnInstance::generate(n, tau, weight, &mut seeds.stream("instance"))
}

/// Samples shared by `gen` and in-process generation in `solve`.
fn generate_dataset(s: &Settings, seeds: &SeedTree) -> Result<Dataset> {
    let inst = instance(s, seeds)?;
    let m: usize = s.require("m")?;
    inst.samples(m, &mut seeds.stream("data"))
}

pub fn key_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".key");
    PathBuf::from(p)
}

pub fn read_key(path: &Path, n: usize) -> Result<BitVector> {
    let text = fs::read_to_string(path)?;
    Ok(BitVector::from_hex(n, text.trim())?)
}

fn cmd_gen(s: &Settings) -> Result<i32> {
    let seeds = seed_tree(s)?;
    let out = PathBuf::from(s.raw("out").ok_or_else(|| usage("--out is required for gen"))?);
    let data = generate_dataset(s, &seeds)?;
    let public = s.flag("public")?;
    data.save(&out, !public)?;
    let secret = data.secret().expect("generated dataset carries its secret");
    fs::write(key_path(&out), format!("{}\n", secret.to_hex()))?;
    let summary = json!({
        "record": "gen",
        "version": VERSION,
        "path": out,
        "n": data.n(),
        "m": data.len(),
        "tau": data.tau(),
        "has_secret": !public,
        "bytes": lpn::encoded_len(data.n(), data.len(), !public),
    });
    println!("{summary}");
    Ok(EXIT_SUCCESS)
}

/// Dataset for the fixed-sample settings plus the secret used for reporting.
fn solve_input(s: &Settings, seeds: &SeedTree) -> Result<(Dataset, Option<BitVector>)> {
    let data = match s.raw("data") {
        Some(path) => {
            let d = Dataset::load(Path::new(path))?;
            if let Some(n) = s.get::<usize>("n")? {
                if n != d.n() {
                    return Err(usage(format!("--n {n} does not match dataset dimension {}", d.n())));
                }
            }
            d
        }
        None => {
            if s.raw("m").is_none() {
                return Err(usage("this setting needs --data or --m"));
            }
            generate_dataset(s, seeds)?
        }
    };
    let truth = match s.raw("key") {
        Some(path) => Some(read_key(Path::new(path), data.n())?),
        None => data.secret().cloned(),
    };
    Ok((data.without_secret(), truth))
}

fn gauss_config(s: &Settings, tau: f64) -> Result<PooledGaussConfig> {
    let mut cfg = PooledGaussConfig::for_noise(tau);
    if let Some(t) = s.get("tau-prime")? {
        cfg.threshold = t;
    }
    if let Some(p) = s.get("pool")? {
        cfg.pool_size = p;
    }
    if let Some(k) = s.get("max-iterations")? {
        cfg.max_iterations = k;
    }
    Ok(cfg)
}

fn moderate_options(s: &Settings) -> Result<ModerateOptions> {
    let mut o = ModerateOptions::default();
    if let Some(r) = s.get("repeat")? {
        o.repeat = r;
    }
    if let Some(r) = s.get("repeat-post")? {
        o.repeat_post = r;
    }
    o.tau_prime = s.get("tau-prime")?;
    if let Some(k) = s.get("max-iterations")? {
        o.max_iterations = k;
    }
    Ok(o)
}

fn cmd_solve(setting: SolveSetting, s: &Settings) -> Result<i32> {
    let seeds = seed_tree(s)?;
    let deterministic = s.flag("deterministic")?;
    let mut log = RunLog::open(s.raw("out"), deterministic)?;
    let config = |profile: Option<&HyperProfile>, options: Value| {
        json!({
            "record": "config",
            "version": VERSION,
            "command": "solve",
            "setting": setting,
            "flags": s.as_json(),
            "profile": profile,
            "options": options,
        })
    };
    let solver_seeds = seeds.child("solver");
    let (result, truth) = match setting {
        SolveSetting::Abundant => {
            if s.raw("data").is_some() {
                return Err(usage("the abundant setting samples from an oracle; drop --data"));
            }
            let inst = instance(s, &seeds)?;
            let (profile, stop_gamma) = build_profile(HyperProfile::abundant(), s)?;
            let mut opts = AbundantOptions::default();
            if let Some(g) = s.get("gamma")?.or(stop_gamma) {
                opts.gamma = g;
            }
            log.record(config(Some(&profile), json!(opts)))?;
            let r = pipelines::solve_abundant(&inst, &profile, &opts, &solver_seeds)?;
            (r, inst.secret().cloned())
        }
        SolveSetting::Restricted => {
            let (data, truth) = solve_input(s, &seeds)?;
            let (profile, _) = build_profile(HyperProfile::restricted(), s)?;
            let mut opts = RestrictedOptions { gamma: s.get("gamma")?, ..Default::default() };
            if let Some(k) = s.get("inits")?.or(s.get("repeat")?) {
                opts.repeat = k;
            }
            if let Some(b) = s.raw("log-base") {
                opts.log_base = match b {
                    "natural" | "e" => LogBase::Natural,
                    "two" | "2" => LogBase::Two,
                    other => return Err(usage(format!("--log-base {other:?}: expected natural or two"))),
                };
            }
            log.record(config(Some(&profile), json!(opts)))?;
            (pipelines::solve_restricted(&data, &profile, &opts, &solver_seeds)?, truth)
        }
        SolveSetting::Moderate => {
            let (data, truth) = solve_input(s, &seeds)?;
            let (profile, _) = build_profile(HyperProfile::moderate(), s)?;
            let opts = moderate_options(s)?;
            log.record(config(Some(&profile), json!(opts)))?;
            let r = pipelines::solve_moderate(&data, &profile, &opts, &solver_seeds).map_err(|e| match e {
                Error::NotEnoughSamples(m) => usage(m),
                other => other,
            })?;
            (r, truth)
        }
        SolveSetting::Gauss => {
            let (data, truth) = solve_input(s, &seeds)?;
            let cfg = gauss_config(s, data.tau())?;
            log.record(config(None, json!(cfg)))?;
            (pipelines::solve_gauss(&data, &cfg, &solver_seeds)?, truth)
        }
        SolveSetting::Hybrid => {
            let (data, truth) = solve_input(s, &seeds)?;
            let k: usize = s.require("suffix-bits")?;
            let holdout = s.get("holdout")?.unwrap_or((data.len() / 5).min(100_000));
            let threshold = (data.tau() + 0.5) / 2.0;
            let opts = HybridOptions { suffix_bits: k, holdout, threshold, first: None };
            let inner = s.raw("inner").unwrap_or("gauss").to_string();
            let r = match inner.as_str() {
                "gauss" => {
                    let cfg = gauss_config(s, data.tau())?;
                    log.record(config(None, json!({"hybrid": opts, "inner": inner, "gauss": cfg})))?;
                    pipelines::solve_hybrid(&data, &opts, &solver_seeds, |d, t| pipelines::solve_gauss(d, &cfg, t))?
                }
                "moderate" => {
                    let (profile, _) = build_profile(HyperProfile::moderate(), s)?;
                    let mopts = moderate_options(s)?;
                    log.record(config(Some(&profile), json!({"hybrid": opts, "inner": inner, "moderate": mopts})))?;
                    pipelines::solve_hybrid(&data, &opts, &solver_seeds, |d, t| {
                        pipelines::solve_moderate(d, &profile, &mopts, t)
                    })?
                }
                other => return Err(usage(format!("--inner {other:?}: expected gauss or moderate"))),
            };
            (r, truth)
        }
    };
    write_result(&mut log, &result, truth.as_ref())?;
    Ok(status_code(result.status))
}

fn grid<T: FromStr + Clone>(s: &Settings, key: &str, single: T) -> Result<Vec<T>>
where
    T::Err: Display,
{
    Ok(s.list(key)?.unwrap_or_else(|| vec![single]))
}

fn cmd_tune(setting: TuneSetting, s: &Settings) -> Result<i32> {
    let seeds = seed_tree(s)?.child("tune");
    let mut log = RunLog::open(s.raw("out"), s.flag("deterministic")?)?;
    let n: usize = s.require("n")?;
    let tau: f64 = s.require("tau")?;
    lpn::check_noise(tau).map_err(|e| usage(e.to_string()))?;
    let repeat = s.get("repeat")?.unwrap_or(3);
    let base = match setting {
        TuneSetting::Abundant => HyperProfile::abundant(),
        TuneSetting::Restricted => HyperProfile::restricted(),
    };
    let (base, _) = build_profile(base, s)?;
    let mut profiles = Vec::new();
    for &lr in &grid(s, "lrs", base.lr)? {
        for &batch in &grid(s, "batches", base.batch)? {
            for &wd in &grid(s, "wds", base.weight_decay)? {
                for &width in &grid(s, "widths", base.width)? {
                    let p = HyperProfile { lr, batch, weight_decay: wd, width, ..base.clone() };
                    p.validate().map_err(|e| usage(e.to_string()))?;
                    profiles.push(p);
                }
            }
        }
    }
    let header =
        json!({"record": "config", "version": VERSION, "command": "tune", "setting": setting, "flags": s.as_json()});
    log.record(header)?;
    let mut err = io::stderr();
    let (best, success) = match setting {
        TuneSetting::Abundant => {
            let gamma = s.get("gamma")?.unwrap_or(0.8);
            let report = pipelines::tune_abundant(n, tau, &profiles, repeat, gamma, &seeds)?;
            writeln!(err, "{:>10} {:>9} {:>6} {:>10}", "lr", "batch", "width", "best_s")?;
            for e in &report.entries {
                log.record(json!({"record": "entry", "profile": e.profile, "times": e.times, "best": e.best}))?;
                let best = e.best.map_or("-".to_string(), |t| format!("{t:.1}"));
                writeln!(err, "{:>10} {:>9} {:>6} {:>10}", e.profile.lr, e.profile.batch, e.profile.width, best)?;
            }
            (report.best.map(|i| report.entries[i].profile.clone()), report.best.is_some())
        }
        TuneSetting::Restricted => {
            let (lo, hi) = match s.raw("m-grid") {
                Some(spec) => {
                    let (a, b) = spec.split_once(':').ok_or_else(|| usage("--m-grid expects lo:hi"))?;
                    let a: u32 = a.trim().parse().map_err(|e| usage(format!("--m-grid: {e}")))?;
                    let b: u32 = b.trim().parse().map_err(|e| usage(format!("--m-grid: {e}")))?;
                    (a, b)
                }
                None => (12, 18),
            };
            if lo > hi || hi > 60 {
                return Err(usage("--m-grid needs lo <= hi <= 60"));
            }
            let sizes = pipelines::half_log2_grid(lo, hi);
            let opts = RestrictedOptions {
                repeat: s.get("inits")?.unwrap_or(8),
                gamma: s.get("gamma")?,
                ..Default::default()
            };
            let report = pipelines::tune_restricted(n, tau, &sizes, &profiles, repeat, &opts, &seeds)?;
            let default_wd = HyperProfile::restricted().weight_decay;
            writeln!(err, "{:>10} {:>10} {:>6} {:>10}", "lr", "wd", "width", "min_m")?;
            for e in &report.entries {
                log.record(json!({
                    "record": "entry",
                    "profile": e.profile,
                    "min_samples": e.min_samples,
                    "evaluations": e.evaluations,
                }))?;
                let mark = if e.profile.weight_decay == default_wd { "*" } else { "" };
                let m = e.min_samples.map_or("-".to_string(), |m| m.to_string());
                writeln!(
                    err,
                    "{:>10} {:>9}{mark:1} {:>6} {:>10}",
                    e.profile.lr, e.profile.weight_decay, e.profile.width, m
                )?;
            }
            (report.best.map(|i| report.entries[i].profile.clone()), report.best.is_some())
        }
    };
    log.record(json!({"record": "result", "best": best, "success": success}))?;
    Ok(if success { EXIT_SUCCESS } else { EXIT_FAILURE })
}

fn cmd_verify(check: &str, s: &Settings) -> Result<i32> {
    let seed = s.get("seed")?.unwrap_or(1);
    let mut log = RunLog::open(s.raw("out"), s.flag("deterministic")?)?;
    log.record(
        json!({"record": "config", "version": VERSION, "command": "verify-theory", "check": check, "seed": seed}),
    )?;
    let report = checks::run(check, &SeedTree::new(seed))?;
    let passed = report.passed;
    let mut v = serde_json::to_value(&report)?;
    v["record"] = json!("result");
    v["success"] = json!(passed);
    log.record(v)?;
    Ok(if passed { EXIT_SUCCESS } else { EXIT_FAILURE })
}

/// Runs one parsed command and returns its exit code.
pub fn execute(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Gen(opts) => cmd_gen(&Settings::resolve(opts)?),
        Command::Solve { setting, opts } => cmd_solve(*setting, &Settings::resolve(opts)?),
        Command::Tune { setting, opts } => cmd_tune(*setting, &Settings::resolve(opts)?),
        Command::VerifyTheory { check, opts } => cmd_verify(check, &Settings::resolve(opts)?),
    }
}

fn is_usage_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::NoiseRate(_)
            | Error::UnsupportedLoss(_)
            | Error::DimensionMismatch { .. }
    )
}

/// Parses `args`, runs the command and maps errors to exit codes.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_SUCCESS };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}
