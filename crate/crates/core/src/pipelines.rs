//! End-to-end solvers for the abundant, restricted and moderate sample
//! regimes, the hybrid suffix enumeration, and the hyperparameter tuners.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classic::{self, GaussOutcome, PooledGaussConfig};
use crate::error::{Error, Result};
use crate::gf2::{BitMatrix, BitVector};
use crate::lpn::{self, random_row, Dataset, DatasetMeta, LpnInstance, Sampler};
use crate::nn::{build_mlp, Activation, Loss, Mlp, Regularizer};
use crate::seed::SeedTree;
use crate::train::{
    evaluate_accuracy, run_training, OptimizerConfig, OptimizerKind, OptimizerState, StopCriterion, StopReason,
    TracePoint, TrainOptions, TrainReport,
};

/// Training hyperparameters for one solver run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperProfile {
    pub lr: f64,
    /// Rows per step; 0 means the whole training set.
    pub batch: usize,
    pub weight_decay: f64,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub loss: Loss,
    pub optimizer: OptimizerKind,
    pub max_steps: Option<u64>,
    pub time_cap_secs: Option<f64>,
}

impl HyperProfile {
    /// Oracle training: Adam, logistic loss, width 1000, batch 2^17.
    pub fn abundant() -> Self {
        Self {
            lr: 2e-3,
            batch: 131_072,
            weight_decay: 0.0,
            width: 1000,
            depth: 1,
            activation: Activation::Relu,
            loss: Loss::Logistic,
            optimizer: OptimizerKind::Adam,
            max_steps: None,
            time_cap_secs: Some(1200.0),
        }
    }

    /// Full-batch training on a small fixed dataset with weight decay.
    pub fn restricted() -> Self {
        Self {
            lr: 1e-4,
            batch: 0,
            weight_decay: 2e-3,
            max_steps: Some(300_000),
            time_cap_secs: None,
            ..Self::abundant()
        }
    }

    /// Fixed-dataset training with large batches.
    pub fn moderate() -> Self {
        Self { lr: 2e-3, batch: 1_048_576, ..Self::abundant() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        if self.width == 0 {
            return bad("width must be positive".into());
        }
        if !(1..=3).contains(&self.depth) {
            return bad(format!("depth {} must be 1..=3", self.depth));
        }
        if self.loss == Loss::ZeroOne {
            return Err(Error::UnsupportedLoss("zero-one"));
        }
        if let Some(t) = self.time_cap_secs {
            if !(t > 0.0) {
                return bad(format!("time cap {t} must be positive"));
            }
        }
        if self.max_steps.is_none() && self.time_cap_secs.is_none() {
            return bad("profile needs a step limit or a time cap".into());
        }
        Ok(())
    }

    pub fn build_model<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Mlp<f32>> {
        build_mlp(n, &vec![self.width; self.depth], self.activation, rng)
    }

    pub fn optimizer(&self, params: usize) -> Result<OptimizerState<f32>> {
        let cfg = match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr, self.weight_decay),
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr, self.weight_decay),
        };
        OptimizerState::new(cfg, params)
    }

    /// Step and time limits of the profile, plus any extra criteria.
    pub fn stop(&self, extra: Vec<StopCriterion>) -> StopCriterion {
        let mut all = extra;
        if let Some(t) = self.max_steps {
            all.push(StopCriterion::ByStep(t));
        }
        if let Some(t) = self.time_cap_secs {
            all.push(StopCriterion::ByTime(Duration::from_secs_f64(t)));
        }
        StopCriterion::Any(all)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Success,
    Failure,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub name: String,
    pub wall_ms: u64,
}

/// Outcome of a solver run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: Status,
    /// Full recovered secret.
    pub secret: Option<BitVector>,
    /// Individually recovered coordinates as `(index, bit)`.
    pub bits: Vec<(usize, bool)>,
    /// Accuracy of the recovered secret on the verification rows.
    pub verification_accuracy: Option<f64>,
    pub wall_ms: u64,
    pub phases: Vec<PhaseTiming>,
    pub trace: Vec<TracePoint>,
    /// Solver-specific measurements.
    pub metrics: BTreeMap<String, f64>,
}

impl SolveResult {
    fn new(status: Status) -> Self {
        Self {
            status,
            secret: None,
            bits: Vec::new(),
            verification_accuracy: None,
            wall_ms: 0,
            phases: Vec::new(),
            trace: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == Status::Success
    }
}

struct Phases {
    start: Instant,
    last: Instant,
    done: Vec<PhaseTiming>,
}

impl Phases {
    fn new() -> Self {
        let now = Instant::now();
        Self { start: now, last: now, done: Vec::new() }
    }

    fn mark(&mut self, name: &str) {
        let now = Instant::now();
        self.done.push(PhaseTiming { name: name.into(), wall_ms: (now - self.last).as_millis() as u64 });
        self.last = now;
    }

    fn finish(self, result: &mut SolveResult) {
        result.wall_ms = self.start.elapsed().as_millis() as u64;
        result.phases = self.done;
    }
}

/// Reads bit `i` of the secret as the rounded output at the unit vector `e_i`.
pub fn read_secret_from_model(model: &Mlp<f32>) -> BitVector {
    let n = model.input_dim();
    BitVector::from_bools((0..n).map(|i| model.predict_bits(BitVector::unit(n, i).words())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbundantOptions {
    /// Clean accuracy the training must reach.
    pub gamma: f64,
    /// Size of the clean set monitored during training.
    pub test_size: usize,
    /// Size of the fresh clean set used to verify the recovered secret.
    pub verify_size: usize,
    pub eval_interval: u64,
    /// Fresh noisy oracle rows used to test the read-out secret.
    pub check_size: usize,
    /// Extra steps between read-out tests once `gamma` is reached.
    pub refine_interval: u64,
}

impl Default for AbundantOptions {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            test_size: lpn::CLEAN_TESTSET_SIZE,
            verify_size: lpn::CLEAN_TESTSET_SIZE,
            eval_interval: 10,
            check_size: lpn::CLEAN_TESTSET_SIZE,
            refine_interval: 10,
        }
    }
}

/// Trains on fresh oracle batches until the clean accuracy reaches `gamma`,
/// then keeps training until the secret read off the unit vectors passes a
/// hypothesis test on fresh noisy samples, and finally verifies it on clean
/// data. A run that hits the time or step limit before both succeed fails.
pub fn solve_abundant(
    instance: &LpnInstance,
    profile: &HyperProfile,
    opts: &AbundantOptions,
    seeds: &SeedTree,
) -> Result<SolveResult> {
    profile.validate()?;
    if opts.refine_interval == 0 || opts.check_size == 0 {
        return Err(Error::InvalidParameter("refine interval and check size must be positive".into()));
    }
    let secret = instance.secret().ok_or(Error::MissingSecret)?;
    let n = instance.n();
    let start = Instant::now();
    let mut phases = Phases::new();
    let clean = Arc::new(lpn::make_clean_testset(secret, opts.test_size, &mut seeds.stream("clean")));
    let check = instance.samples(opts.check_size, &mut seeds.stream("check"))?;
    let threshold = (instance.tau() + 0.5) / 2.0;
    let mut model = profile.build_model(n, &mut seeds.stream("init"))?;
    let mut opt = profile.optimizer(model.param_count())?;
    let batch = if profile.batch == 0 { lpn::CLEAN_TESTSET_SIZE } else { profile.batch };
    let mut sampler = Sampler::oracle(instance.clone(), batch, seeds.stream("sampler"))?;
    let stop = profile.stop(vec![StopCriterion::ByAccuracy {
        dataset: clean.clone(),
        gamma: opts.gamma,
        interval: opts.eval_interval,
    }]);
    let topts = TrainOptions {
        loss: profile.loss,
        regularizer: Regularizer::None,
        eval_interval: opts.eval_interval,
        monitor: None,
    };
    let report = run_training(&mut model, &mut sampler, &mut opt, &stop, &topts)?;
    phases.mark("train");
    let reached = report.stop == StopReason::Accuracy;
    let mut steps = report.steps;
    let mut trace = report.trace;

    let mut candidate = read_secret_from_model(&model);
    let mut accepted = reached && classic::hypothesis_test(&candidate, &check, threshold)?.0;
    let refine_opts = TrainOptions { monitor: Some(clean.clone()), eval_interval: opts.refine_interval, ..topts };
    while reached && !accepted {
        let mut limits = vec![StopCriterion::ByStep(opts.refine_interval)];
        if let Some(t) = profile.time_cap_secs {
            let left = t - start.elapsed().as_secs_f64();
            if left <= 0.0 {
                break;
            }
            limits.push(StopCriterion::ByTime(Duration::from_secs_f64(left)));
        }
        if let Some(t) = profile.max_steps {
            if steps >= t {
                break;
            }
            limits.push(StopCriterion::ByStep(t - steps));
        }
        let more = run_training(&mut model, &mut sampler, &mut opt, &StopCriterion::Any(limits), &refine_opts)?;
        let offset = steps;
        let wall = start.elapsed().as_millis() as u64 - more.wall_ms;
        trace.extend(more.trace.into_iter().skip(1).map(|p| TracePoint {
            step: p.step + offset,
            wall_ms: p.wall_ms + wall,
            ..p
        }));
        steps += more.steps;
        candidate = read_secret_from_model(&model);
        accepted = classic::hypothesis_test(&candidate, &check, threshold)?.0;
    }
    phases.mark("refine");

    let verify = lpn::make_clean_testset(secret, opts.verify_size, &mut seeds.stream("verify"));
    let acc = 1.0 - verify.disagreement_rate(&candidate)?;
    phases.mark("verify");

    let mut result =
        SolveResult::new(if reached && accepted && acc == 1.0 { Status::Success } else { Status::Failure });
    result.verification_accuracy = Some(acc);
    result.secret = Some(candidate);
    result.metrics.insert("steps".into(), steps as f64);
    result.metrics.insert("steps_to_gamma".into(), report.steps as f64);
    if let Some(a) = trace.iter().rev().find_map(|p| p.test_acc) {
        result.metrics.insert("clean_accuracy".into(), a);
    }
    result.trace = trace;
    phases.finish(&mut result);
    Ok(result)
}

/// Minimum time-to-accuracy of one profile over its repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbundantTuneEntry {
    pub profile: HyperProfile,
    /// Seconds to reach the accuracy target per repeat; `None` if it never did.
    pub times: Vec<Option<f64>>,
    pub best: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbundantTuneReport {
    pub entries: Vec<AbundantTuneEntry>,
    /// Index of the profile with the smallest time.
    pub best: Option<usize>,
}

/// For every profile, runs `repeat` fresh secrets to `gamma` clean accuracy
/// and keeps the fastest; returns the profile with the smallest such time.
pub fn tune_abundant(
    n: usize,
    tau: f64,
    profiles: &[HyperProfile],
    repeat: usize,
    gamma: f64,
    seeds: &SeedTree,
) -> Result<AbundantTuneReport> {
    if profiles.is_empty() {
        return Err(Error::InvalidParameter("no profiles to tune".into()));
    }
    let mut entries = Vec::with_capacity(profiles.len());
    for (p, profile) in profiles.iter().enumerate() {
        profile.validate()?;
        let mut times = Vec::with_capacity(repeat);
        for r in 0..repeat {
            let trial = seeds.indexed("profile", p as u64).indexed("repeat", r as u64);
            let instance = LpnInstance::generate(n, tau, None, &mut trial.stream("secret"))?;
            let secret = instance.secret().expect("generated").clone();
            let clean = Arc::new(lpn::make_clean_testset(&secret, lpn::CLEAN_TESTSET_SIZE, &mut trial.stream("clean")));
            let mut model = profile.build_model(n, &mut trial.stream("init"))?;
            let mut opt = profile.optimizer(model.param_count())?;
            let batch = if profile.batch == 0 { lpn::CLEAN_TESTSET_SIZE } else { profile.batch };
            let mut sampler = Sampler::oracle(instance, batch, trial.stream("sampler"))?;
            let stop = profile.stop(vec![StopCriterion::ByAccuracy { dataset: clean, gamma, interval: 10 }]);
            let opts = TrainOptions { eval_interval: 0, ..TrainOptions::new(profile.loss) };
            let start = Instant::now();
            let report = run_training(&mut model, &mut sampler, &mut opt, &stop, &opts)?;
            times.push((report.stop == StopReason::Accuracy).then(|| start.elapsed().as_secs_f64()));
        }
        let best = times.iter().flatten().copied().reduce(f64::min);
        entries.push(AbundantTuneEntry { profile: profile.clone(), times, best });
    }
    let best = entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.best.map(|t| (i, t)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    Ok(AbundantTuneReport { entries, best })
}

/// Logarithm used in the restricted acceptance threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

/// `1/2 + sqrt(log(20) / m)`.
pub fn restricted_gamma(m: usize, base: LogBase) -> f64 {
    let l = match base {
        LogBase::Natural => 20f64.ln(),
        LogBase::Two => 20f64.log2(),
    };
    0.5 + (l / m as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedOptions {
    /// Initializations tried per guess.
    pub repeat: usize,
    /// Test accuracy a guess must exceed; defaults to [`restricted_gamma`].
    pub gamma: Option<f64>,
    pub log_base: LogBase,
}

impl Default for RestrictedOptions {
    fn default() -> Self {
        Self { repeat: 8, gamma: None, log_base: LogBase::Natural }
    }
}

/// Guesses the last secret bit: for `g` in `{0, 1}` the last coordinate is
/// folded into the labels of both halves of the data, and a network trained
/// on one half must beat `gamma` on the other.
pub fn solve_restricted(
    dataset: &Dataset,
    profile: &HyperProfile,
    opts: &RestrictedOptions,
    seeds: &SeedTree,
) -> Result<SolveResult> {
    profile.validate()?;
    let m = dataset.len();
    let n = dataset.n();
    if m < 4 {
        return Err(Error::NotEnoughSamples(format!("restricted solver needs at least 4 samples, got {m}")));
    }
    if n < 2 {
        return Err(Error::InvalidParameter("restricted solver needs n >= 2".into()));
    }
    let gamma = opts.gamma.unwrap_or_else(|| restricted_gamma(m, opts.log_base));
    let half = m / 2;
    let (train, rest) = dataset.split_at(half);
    let test = rest.slice(0, half);
    let mut phases = Phases::new();
    let mut result = SolveResult::new(Status::Inconclusive);
    result.metrics.insert("gamma".into(), gamma);
    let batch = if profile.batch == 0 { half } else { profile.batch };
    for g in [false, true] {
        let train_g = lpn::guess_transform(&train, g)?;
        let test_g = lpn::guess_transform(&test, g)?;
        for r in 0..opts.repeat {
            let trial = seeds.indexed("guess", g as u64).indexed("init", r as u64);
            let mut model = profile.build_model(n - 1, &mut trial.stream("init"))?;
            let mut opt = profile.optimizer(model.param_count())?;
            let mut sampler = Sampler::batch(&train_g, batch, trial.stream("sampler"))?;
            let topts = TrainOptions { eval_interval: 0, ..TrainOptions::new(profile.loss) };
            let report = run_training(&mut model, &mut sampler, &mut opt, &profile.stop(Vec::new()), &topts)?;
            let acc = evaluate_accuracy(&model, &test_g)?;
            result.metrics.insert(format!("test_acc_g{}_r{r}", g as u8), acc);
            result.trace.push(TracePoint {
                step: report.steps,
                wall_ms: report.wall_ms,
                train_acc: report.trace.last().and_then(|p| p.train_acc),
                test_acc: Some(acc),
            });
            if acc > gamma {
                phases.mark("train");
                result.status = Status::Success;
                result.bits = vec![(n - 1, g)];
                result.verification_accuracy = Some(acc);
                phases.finish(&mut result);
                return Ok(result);
            }
        }
    }
    phases.mark("train");
    phases.finish(&mut result);
    Ok(result)
}

/// Smallest index in `0..len` whose predicate holds, assuming it is
/// monotone, found by bisection. The last index is evaluated only when every
/// smaller index fails; `None` means it fails too.
pub fn bisect_smallest(len: usize, mut pred: impl FnMut(usize) -> Result<bool>) -> Result<Option<usize>> {
    if len == 0 {
        return Ok(None);
    }
    let (mut left, mut right) = (0, len - 1);
    let mut last_checked = None;
    while left != right {
        let mid = (left + right) / 2;
        if pred(mid)? {
            right = mid;
        } else {
            left = mid + 1;
        }
        last_checked = Some(mid);
    }
    if left == len - 1 && last_checked != Some(left) && !pred(left)? {
        return Ok(None);
    }
    Ok(Some(left))
}

/// Sample sizes `round(2^(k/2))` for `k` in `lo_half..=hi_half`.
pub fn half_log2_grid(lo_half: u32, hi_half: u32) -> Vec<usize> {
    (lo_half..=hi_half).map(|k| 2f64.powf(k as f64 / 2.0).round() as usize).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedTuneEntry {
    pub profile: HyperProfile,
    /// Smallest grid size meeting the success rule; `None` if even the
    /// largest fails.
    pub min_samples: Option<usize>,
    /// Successes per evaluated grid size.
    pub evaluations: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedTuneReport {
    pub entries: Vec<RestrictedTuneEntry>,
    pub best: Option<usize>,
}

/// For every profile, bisects the sample grid for the smallest size at which
/// at least `floor(2 * repeat / 3)` of `repeat` fresh datasets yield the
/// correct last bit.
pub fn tune_restricted(
    n: usize,
    tau: f64,
    grid: &[usize],
    profiles: &[HyperProfile],
    repeat: usize,
    opts: &RestrictedOptions,
    seeds: &SeedTree,
) -> Result<RestrictedTuneReport> {
    if grid.is_empty() || profiles.is_empty() {
        return Err(Error::InvalidParameter("tuning needs a nonempty grid and profile list".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("sample grid must be strictly increasing".into()));
    }
    let needed = 2 * repeat / 3;
    let mut entries = Vec::new();
    for (p, profile) in profiles.iter().enumerate() {
        let mut evaluations = Vec::new();
        let found = bisect_smallest(grid.len(), |idx| {
            let m = grid[idx];
            let mut wins = 0;
            for r in 0..repeat {
                let trial = seeds.indexed("profile", p as u64).indexed("m", m as u64).indexed("repeat", r as u64);
                let inst = LpnInstance::generate(n, tau, None, &mut trial.stream("secret"))?;
                let data = inst.samples(m, &mut trial.stream("data"))?;
                let res = solve_restricted(&data, profile, opts, &trial.child("solve"))?;
                let truth = inst.secret().expect("generated").get(n - 1);
                if res.bits.first().map(|&(_, b)| b) == Some(truth) {
                    wins += 1;
                }
            }
            evaluations.push((m, wins));
            Ok(wins >= needed)
        })?;
        entries.push(RestrictedTuneEntry {
            profile: profile.clone(),
            min_samples: found.map(|i| grid[i]),
            evaluations,
        });
    }
    let best = entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.min_samples.map(|m| (i, m)))
        .min_by_key(|&(_, m)| m)
        .map(|(i, _)| i);
    Ok(RestrictedTuneReport { entries, best })
}

/// Random `(n + 1)`-bit inputs labeled `round(M(x[..n])) + x[n]`. Under the
/// extended secret `(s, 1)` the label error equals the model's error on
/// `x[..n]`, and the labels are balanced whatever the model predicts.
pub fn build_boosting_set<R: Rng + ?Sized>(model: &Mlp<f32>, size: usize, rng: &mut R) -> Result<Dataset> {
    let n = model.input_dim();
    let mut inputs = BitMatrix::with_capacity(n + 1, size);
    let mut labels = BitVector::zeros(size);
    let mut row = vec![0u64; (n + 1).div_ceil(64)];
    let mut prefix = vec![0u64; n.div_ceil(64)];
    for i in 0..size {
        random_row(n + 1, rng, &mut row);
        let words = prefix.len();
        prefix.copy_from_slice(&row[..words]);
        if !n.is_multiple_of(64) {
            *prefix.last_mut().expect("n >= 1") &= (1u64 << (n % 64)) - 1;
        }
        let extra = (row[n / 64] >> (n % 64)) & 1 == 1;
        labels.set(i, model.predict_bits(&prefix) ^ extra);
        inputs.push_row_words(&row);
    }
    Dataset::new(inputs, labels, DatasetMeta { n: n + 1, tau: 0.0, source: "boosting".into(), secret: None })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModerateOptions {
    pub repeat: usize,
    pub repeat_post: usize,
    /// Boosting rows used as the Gaussian-elimination pool.
    pub boost_pool: usize,
    /// Boosting rows used for the hypothesis test.
    pub boost_test: usize,
    /// Hypothesis-test threshold; by default five standard errors below 1/2.
    pub tau_prime: Option<f64>,
    pub max_iterations: u64,
    /// Held-out noisy rows; defaults to `2n / (1/2 - tau)^2`.
    pub test_size: Option<usize>,
    /// Clean rows for reporting the model's accuracy when the secret is known.
    pub monitor_size: usize,
}

impl Default for ModerateOptions {
    fn default() -> Self {
        Self {
            repeat: 1,
            repeat_post: 20,
            boost_pool: 131_072,
            boost_test: 100_000,
            tau_prime: None,
            max_iterations: 200_000,
            test_size: None,
            monitor_size: 0,
        }
    }
}

impl ModerateOptions {
    pub fn threshold(&self) -> f64 {
        self.tau_prime.unwrap_or(0.5 - 2.5 / (self.boost_test as f64).sqrt())
    }
}

/// Runs pooled Gauss `repeat_post` times on the boosting set (first
/// `pool` rows as the pool, the rest as the test) and collects the outcomes.
pub fn post_process<F: FnMut(usize) -> crate::seed::Rng>(
    boost: &Dataset,
    pool: usize,
    cfg: &PooledGaussConfig,
    repeat_post: usize,
    mut rng_for: F,
) -> Result<Vec<GaussOutcome>> {
    let (pool_set, test_set) = boost.split_at(pool);
    (0..repeat_post).map(|k| classic::pooled_gauss_split(&pool_set, &test_set, cfg, &mut rng_for(k))).collect()
}

/// Trains on a fixed dataset, pseudo-labels fresh random inputs through the
/// model with the rebalancing bit, decodes the pseudo-labeled set with pooled
/// Gaussian elimination and accepts a candidate that is accurate enough on
/// held-out rows.
pub fn solve_moderate(
    dataset: &Dataset,
    profile: &HyperProfile,
    opts: &ModerateOptions,
    seeds: &SeedTree,
) -> Result<SolveResult> {
    solve_moderate_with(dataset, profile, opts, seeds, |_, _| {})
}

/// [`solve_moderate`] that hands every boosting set and its repeat index to
/// `inspect` before post-processing.
pub fn solve_moderate_with(
    dataset: &Dataset,
    profile: &HyperProfile,
    opts: &ModerateOptions,
    seeds: &SeedTree,
    mut inspect: impl FnMut(usize, &Dataset),
) -> Result<SolveResult> {
    profile.validate()?;
    let n = dataset.n();
    let tau = dataset.tau();
    lpn::check_noise(tau)?;
    let m1 = opts.test_size.unwrap_or_else(|| classic::moderate_test_size(n, tau));
    if dataset.len() <= m1 {
        return Err(Error::NotEnoughSamples(format!(
            "moderate solver needs more than m1 = {m1} samples, got {}",
            dataset.len()
        )));
    }
    let threshold = classic::moderate_accept_threshold(n, tau, m1);
    let (train, test) = dataset.split_at(dataset.len() - m1);
    let monitor = match (dataset.secret(), opts.monitor_size) {
        (Some(s), k) if k > 0 => Some(Arc::new(lpn::make_clean_testset(s, k, &mut seeds.stream("monitor")))),
        _ => None,
    };
    let gauss_cfg = PooledGaussConfig {
        pool_size: opts.boost_pool,
        test_size: opts.boost_test,
        threshold: opts.threshold(),
        max_iterations: opts.max_iterations,
    };
    let mut phases = Phases::new();
    let mut result = SolveResult::new(Status::Failure);
    result.metrics.insert("m1".into(), m1 as f64);
    result.metrics.insert("accept_threshold".into(), threshold);
    result.metrics.insert("tau_prime".into(), gauss_cfg.threshold);
    let batch = if profile.batch == 0 { train.len() } else { profile.batch };
    for r in 0..opts.repeat {
        let trial = seeds.indexed("repeat", r as u64);
        let mut model = profile.build_model(n, &mut trial.stream("init"))?;
        let mut opt = profile.optimizer(model.param_count())?;
        let mut sampler = Sampler::batch(&train, batch, trial.stream("sampler"))?;
        let topts = TrainOptions {
            loss: profile.loss,
            regularizer: Regularizer::None,
            eval_interval: if monitor.is_some() { 10 } else { 0 },
            monitor: monitor.clone(),
        };
        let report: TrainReport = run_training(&mut model, &mut sampler, &mut opt, &profile.stop(Vec::new()), &topts)?;
        result.trace.extend(report.trace.iter().cloned());
        result.metrics.insert(format!("steps_r{r}"), report.steps as f64);
        if let Some(m) = &monitor {
            result.metrics.insert(format!("clean_accuracy_r{r}"), evaluate_accuracy(&model, m)?);
        }
        phases.mark("train");

        let boost = build_boosting_set(&model, opts.boost_pool + opts.boost_test, &mut trial.stream("boost"))?;
        let ones = boost.labels().count_ones() as f64;
        result.metrics.insert(format!("boost_label_mean_r{r}"), ones / boost.len() as f64);
        if let Some(s) = dataset.secret() {
            let extended = s.concat(&BitVector::from_bools([true]));
            result.metrics.insert(format!("boost_error_r{r}"), boost.disagreement_rate(&extended)?);
        }
        inspect(r, &boost);
        phases.mark("boost");

        let outcomes = post_process(&boost, opts.boost_pool, &gauss_cfg, opts.repeat_post, |k| {
            trial.indexed("post", k as u64).rng()
        })?;
        phases.mark("post");
        let mut seen: Vec<BitVector> = Vec::new();
        for out in &outcomes {
            let Some(c) = &out.candidate else { continue };
            let candidate = c.truncated(n);
            if seen.contains(&candidate) {
                continue;
            }
            let acc = 1.0 - test.disagreement_rate(&candidate)?;
            seen.push(candidate.clone());
            if acc >= threshold {
                result.status = Status::Success;
                result.secret = Some(candidate);
                result.verification_accuracy = Some(acc);
                break;
            }
        }
        result.metrics.insert(format!("candidates_r{r}"), seen.len() as f64);
        phases.mark("verify");
        if result.is_success() {
            break;
        }
    }
    phases.finish(&mut result);
    Ok(result)
}

/// Pooled Gauss on a fixed dataset, split into pool and test rows.
pub fn solve_gauss(dataset: &Dataset, cfg: &PooledGaussConfig, seeds: &SeedTree) -> Result<SolveResult> {
    let mut cfg = *cfg;
    if dataset.len() < cfg.pool_size + cfg.test_size {
        cfg.test_size = cfg.test_size.min(dataset.len() / 2);
        cfg.pool_size = dataset.len() - cfg.test_size;
    }
    let mut phases = Phases::new();
    let out = classic::pooled_gauss(dataset, &cfg, &mut seeds.stream("gauss"))?;
    phases.mark("gauss");
    let mut result = SolveResult::new(if out.candidate.is_some() { Status::Success } else { Status::Failure });
    result.verification_accuracy = out.error_rate.map(|e| 1.0 - e);
    result.secret = out.candidate;
    result.metrics.insert("iterations".into(), out.iterations as f64);
    result.metrics.insert("solved".into(), out.solved as f64);
    phases.finish(&mut result);
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridOptions {
    /// Coordinates enumerated from the end of the secret.
    pub suffix_bits: usize,
    /// Trailing rows held out to verify full candidates.
    pub holdout: usize,
    /// Accept a full candidate with holdout error at most this.
    pub threshold: f64,
    /// Suffix tried before the ascending scan.
    pub first: Option<u64>,
}

/// Enumerates the last `suffix_bits` secret coordinates in ascending order,
/// runs `inner` on each reduced dataset and returns the first full candidate
/// accepted on the held-out rows.
pub fn solve_hybrid<F>(dataset: &Dataset, opts: &HybridOptions, seeds: &SeedTree, mut inner: F) -> Result<SolveResult>
where
    F: FnMut(&Dataset, &SeedTree) -> Result<SolveResult>,
{
    let n = dataset.n();
    let k = opts.suffix_bits;
    if k > 24 || k >= n {
        return Err(Error::InvalidParameter(format!("cannot enumerate {k} suffix bits of n = {n}")));
    }
    if opts.holdout == 0 || opts.holdout >= dataset.len() {
        return Err(Error::NotEnoughSamples("hybrid solver needs a nonempty holdout and training part".into()));
    }
    let (work, holdout) = dataset.split_at(dataset.len() - opts.holdout);
    let mut phases = Phases::new();
    let order = opts.first.into_iter().chain((0..1u64 << k).filter(|&u| Some(u) != opts.first));
    let mut tried = 0u64;
    for u in order {
        tried += 1;
        let suffix = BitVector::from_words(k, vec![u]);
        let reduced = lpn::enumerate_suffix(&work, &suffix)?;
        let mut res = inner(&reduced, &seeds.indexed("suffix", u))?;
        let Some(partial) = res.secret.clone().filter(|_| res.is_success()) else { continue };
        let full = partial.concat(&suffix);
        let (accept, rate) = classic::hypothesis_test(&full, &holdout, opts.threshold)?;
        if accept {
            phases.mark("enumerate");
            res.status = Status::Success;
            res.secret = Some(full);
            res.verification_accuracy = Some(1.0 - rate);
            res.metrics.insert("suffix".into(), u as f64);
            res.metrics.insert("suffixes_tried".into(), tried as f64);
            phases.finish(&mut res);
            return Ok(res);
        }
    }
    phases.mark("enumerate");
    let mut res = SolveResult::new(Status::Failure);
    res.metrics.insert("suffixes_tried".into(), tried as f64);
    phases.finish(&mut res);
    Ok(res)
}
