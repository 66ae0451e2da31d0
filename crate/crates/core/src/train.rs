//! Optimizers, stop criteria and the gradient-descent training loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf2::{parity_words, BitMatrix, BitVector};
use crate::lpn::{random_row, Dataset, Sampler};
use crate::nn::{Loss, Mlp, Real, Regularizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Added to the gradient as `weight_decay * w` before the update.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::Adam, ..Self::sgd(lr, weight_decay) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return bad("Adam epsilon must be positive");
        }
        Ok(())
    }
}

/// Optimizer configuration plus Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: OptimizerConfig,
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        let moments = match config.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => param_count,
        };
        Ok(Self { config, m: vec![F::zero(); moments], v: vec![F::zero(); moments], t: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch { expected: params.len(), found: grads.len() });
        }
        match self.config.kind {
            OptimizerKind::Sgd => {
                self.t += 1;
                sgd_update(self.config.lr, self.config.weight_decay, params, grads)
            }
            OptimizerKind::Adam => adam_update(self, params, grads),
        }
    }
}

/// `w <- w - lr * (weight_decay * w + g)`.
pub fn sgd_update<F: Real>(lr: f64, weight_decay: f64, params: &mut [F], grads: &[F]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), found: grads.len() });
    }
    let (lr, wd) = (F::of(lr), F::of(weight_decay));
    for (w, &g) in params.iter_mut().zip(grads) {
        *w -= lr * (wd * *w + g);
    }
    Ok(())
}

/// Adam with bias correction; weight decay enters through the gradient.
pub fn adam_update<F: Real>(state: &mut OptimizerState<F>, params: &mut [F], grads: &[F]) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), found: grads.len().min(state.m.len()) });
    }
    let c = state.config;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
    let corr1 = F::of(1.0 / (1.0 - c.beta1.powi(t)));
    let corr2 = F::of(1.0 / (1.0 - c.beta2.powi(t)));
    let (lr, wd, eps) = (F::of(c.lr), F::of(c.weight_decay), F::of(c.eps));
    for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let d = wd * *w + g;
        *m = b1 * *m + one_b1 * d;
        *v = b2 * *v + one_b2 * d * d;
        let m_hat = *m * corr1;
        let v_hat = *v * corr2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// When to end a training run. Criteria are checked between steps only.
#[derive(Clone, Debug)]
pub enum StopCriterion {
    ByTime(Duration),
    ByStep(u64),
    /// Stop once accuracy on `dataset` reaches `gamma`, evaluated every
    /// `interval` steps.
    ByAccuracy {
        dataset: Arc<Dataset>,
        gamma: f64,
        interval: u64,
    },
    /// Stop when any of the criteria fires.
    Any(Vec<StopCriterion>),
}

impl StopCriterion {
    pub fn validate(&self) -> Result<()> {
        match self {
            StopCriterion::ByTime(d) if d.is_zero() => Err(Error::Config("time threshold must be positive".into())),
            StopCriterion::ByAccuracy { dataset, gamma, interval } => {
                if dataset.is_empty() {
                    return Err(Error::Config("accuracy stop needs a nonempty evaluation set".into()));
                }
                if *interval == 0 || !(0.0..=1.0).contains(gamma) {
                    return Err(Error::Config("accuracy stop needs interval > 0 and gamma in [0, 1]".into()));
                }
                Ok(())
            }
            StopCriterion::Any(list) => list.iter().try_for_each(|c| c.validate()),
            _ => Ok(()),
        }
    }

    fn accuracy_targets(&self) -> Vec<(&Arc<Dataset>, f64, u64)> {
        match self {
            StopCriterion::ByAccuracy { dataset, gamma, interval } => vec![(dataset, *gamma, *interval)],
            StopCriterion::Any(list) => list.iter().flat_map(|c| c.accuracy_targets()).collect(),
            _ => Vec::new(),
        }
    }

    fn step_limit(&self) -> Option<u64> {
        match self {
            StopCriterion::ByStep(t) => Some(*t),
            StopCriterion::Any(list) => list.iter().filter_map(|c| c.step_limit()).min(),
            _ => None,
        }
    }

    fn time_limit(&self) -> Option<Duration> {
        match self {
            StopCriterion::ByTime(d) => Some(*d),
            StopCriterion::Any(list) => list.iter().filter_map(|c| c.time_limit()).min(),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Time,
    Step,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub wall_ms: u64,
    /// Accuracy on the most recent training batch, before its update.
    pub train_acc: Option<f64>,
    /// Accuracy on the evaluation set.
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub wall_ms: u64,
    pub trace: Vec<TracePoint>,
    pub stop: StopReason,
    pub final_loss: Option<f64>,
}

impl TrainReport {
    /// One JSON object per evaluation point; the last line adds the stop reason.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.trace {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        let last = self.trace.last();
        let fin = serde_json::json!({
            "step": self.steps,
            "wall_ms": self.wall_ms,
            "train_acc": last.and_then(|p| p.train_acc),
            "test_acc": last.and_then(|p| p.test_acc),
            "stop": self.stop,
        });
        serde_json::to_writer(&mut w, &fin)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn last_test_acc(&self) -> Option<f64> {
        self.trace.iter().rev().find_map(|p| p.test_acc)
    }
}

/// Loop settings not covered by the stop criterion.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub loss: Loss,
    pub regularizer: Regularizer,
    /// Trace cadence in steps; accuracy stops use their own interval.
    pub eval_interval: u64,
    /// Dataset reported as `test_acc` when no accuracy stop supplies one.
    pub monitor: Option<Arc<Dataset>>,
}

impl TrainOptions {
    pub fn new(loss: Loss) -> Self {
        Self { loss, regularizer: Regularizer::None, eval_interval: 100, monitor: None }
    }
}

/// Gradient-based optimization: fetch a batch, take the gradient of the
/// regularized mean loss, update, until `stop` fires. Updates `model` in place.
pub fn run_training<F: Real, R: Rng>(
    model: &mut Mlp<F>,
    sampler: &mut Sampler<'_, R>,
    optimizer: &mut OptimizerState<F>,
    stop: &StopCriterion,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if opts.loss == Loss::ZeroOne {
        return Err(Error::UnsupportedLoss("zero-one"));
    }
    stop.validate()?;
    opts.regularizer.validate()?;
    if sampler.n() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), found: sampler.n() });
    }
    let start = Instant::now();
    let targets = stop.accuracy_targets();
    let step_limit = stop.step_limit();
    let time_limit = stop.time_limit();
    let monitor = targets.first().map(|t| t.0.clone()).or_else(|| opts.monitor.clone());
    let mut trace = Vec::new();
    let mut steps = 0u64;
    let mut last_train_acc = None;
    let mut final_loss = None;
    let elapsed_ms = |s: &Instant| s.elapsed().as_millis() as u64;

    let reason = loop {
        let mut monitor_acc = None;
        let mut reached = false;
        for (data, gamma, interval) in &targets {
            if steps.is_multiple_of(*interval) {
                let acc = evaluate_accuracy(model, data)?;
                if monitor.as_ref().is_some_and(|m| Arc::ptr_eq(m, data)) {
                    monitor_acc = Some(acc);
                }
                reached |= acc >= *gamma;
            }
        }
        let due = opts.eval_interval > 0 && steps.is_multiple_of(opts.eval_interval);
        if due || reached {
            if monitor_acc.is_none() && due {
                if let Some(d) = &monitor {
                    monitor_acc = Some(evaluate_accuracy(model, d)?);
                }
            }
            trace.push(TracePoint {
                step: steps,
                wall_ms: elapsed_ms(&start),
                train_acc: last_train_acc,
                test_acc: monitor_acc,
            });
        }
        if reached {
            break StopReason::Accuracy;
        }
        if step_limit.is_some_and(|t| steps >= t) {
            break StopReason::Step;
        }
        if time_limit.is_some_and(|t| start.elapsed() >= t) {
            break StopReason::Time;
        }
        let batch = sampler.get_data()?;
        let grad = model.backward(batch.inputs(), batch.labels(), opts.loss, opts.regularizer)?;
        last_train_acc = Some(grad.correct as f64 / batch.len() as f64);
        final_loss = Some(grad.loss);
        optimizer.step(model.params_mut(), &grad.values)?;
        steps += 1;
    };

    if trace.last().is_none_or(|p| p.step != steps) {
        let test_acc = match &monitor {
            Some(d) => Some(evaluate_accuracy(model, d)?),
            None => None,
        };
        trace.push(TracePoint { step: steps, wall_ms: elapsed_ms(&start), train_acc: last_train_acc, test_acc });
    }
    Ok(TrainReport { steps, wall_ms: elapsed_ms(&start), trace, stop: reason, final_loss })
}

/// Fraction of rows whose rounded prediction equals the label.
pub fn evaluate_accuracy<F: Real>(model: &Mlp<F>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(model.count_correct(dataset.inputs(), dataset.labels())? as f64 / dataset.len() as f64)
}

/// Result of comparing gradients on clean and noisy labels over shared inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingProbe {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    /// `|| noisy / (1 - 2 tau) - clean ||_2` per parameter block
    /// (`W1`, `b1`, `W2`, `b2`, ...).
    pub deviation: Vec<f64>,
}

impl ScalingProbe {
    pub fn max_deviation(&self) -> f64 {
        self.deviation.iter().copied().fold(0.0, f64::max)
    }
}

/// Draws `batch` uniform inputs, labels them with exact parities and with
/// parities flipped at rate `tau`, and compares the two MAE gradients.
pub fn gradient_scaling_probe<R: Rng + ?Sized>(
    model: &Mlp<f64>,
    secret: &BitVector,
    batch: usize,
    tau: f64,
    rng: &mut R,
) -> Result<ScalingProbe> {
    crate::lpn::check_noise(tau)?;
    let n = secret.len();
    if n != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), found: n });
    }
    let mut inputs = BitMatrix::with_capacity(n, batch);
    let mut clean = BitVector::zeros(batch);
    let mut noisy = BitVector::zeros(batch);
    let mut row = vec![0u64; n.div_ceil(64)];
    for i in 0..batch {
        random_row(n, rng, &mut row);
        let y = parity_words(&row, secret.words());
        let flip = tau > 0.0 && rng.random_bool(tau);
        clean.set(i, y);
        noisy.set(i, y ^ flip);
        inputs.push_row_words(&row);
    }
    let gc = model.backward(&inputs, &clean, Loss::Mae, Regularizer::None)?.values;
    let gn = model.backward(&inputs, &noisy, Loss::Mae, Regularizer::None)?.values;
    let scale = 1.0 / (1.0 - 2.0 * tau);
    let deviation = parameter_blocks(model)
        .into_iter()
        .map(|r| r.map(|k| (gn[k] * scale - gc[k]).powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok(ScalingProbe { clean: gc, noisy: gn, deviation })
}

/// Index ranges of each weight matrix and bias vector, in storage order.
pub fn parameter_blocks<F: Real>(model: &Mlp<F>) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for l in model.layers() {
        out.push(offset..offset + l.weight_len());
        out.push(offset + l.weight_len()..offset + l.param_len());
        offset += l.param_len();
    }
    out
}

/// Largest `|dM/dw|` over every parameter and every input in `{0,1}^n`.
pub fn max_output_sensitivity(model: &Mlp<f64>) -> Result<f64> {
    let n = model.input_dim();
    if n > 20 {
        return Err(Error::InvalidParameter(format!("exhaustive sensitivity needs n <= 20, got {n}")));
    }
    let mut c = 0.0f64;
    let labels = BitVector::zeros(1);
    for x in 0..(1u64 << n) {
        let mut inputs = BitMatrix::with_capacity(n, 1);
        inputs.push_row_words(&[x]);
        // with label 0 and an output in (0, 1) the MAE gradient is dM/dw
        let g = model.backward(&inputs, &labels, Loss::Mae, Regularizer::None)?;
        c = g.values.iter().fold(c, |acc, v| acc.max(v.abs()));
    }
    Ok(c)
}

/// Deviation `eps` at which `8 n d exp(-eps^2 (1-2tau)^2 B / (2 n d C^2))`
/// equals `delta`.
pub fn scaling_epsilon(n: usize, d: usize, c: f64, tau: f64, batch: usize, delta: f64) -> f64 {
    let nd = (n * d) as f64;
    let q = (1.0 - 2.0 * tau).powi(2);
    (2.0 * nd * c * c * (8.0 * nd / delta).ln() / (q * batch as f64)).sqrt()
}
