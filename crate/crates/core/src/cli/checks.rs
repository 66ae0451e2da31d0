//! Property suites behind `verify-theory`. Each check runs at a fixed seed
//! and reports its worst observed statistic next to the tolerance.

use rand::Rng;
use serde::Serialize;

use crate::classic::{bkw_reduce, predicted_bkw_noise, BkwConfig};
use crate::error::Result;
use crate::gf2::{dot_parity, BitMatrix, BitVector};
use crate::lpn::{self, LpnInstance};
use crate::nn::{build_mlp, build_parity_network, regularizer_eval, Activation, Loss, Mlp, Regularizer};
use crate::seed::SeedTree;
use crate::train::{gradient_scaling_probe, max_output_sensitivity, scaling_epsilon};

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub passed: bool,
    pub statistic: f64,
    pub tolerance: f64,
    pub detail: String,
}

/// Exhaustive comparison of the explicit parity network with `dot_parity`.
/// Returns the number of mismatching (secret, input) pairs.
pub fn parity_network_mismatches(n: usize, secrets: usize, seeds: &SeedTree) -> Result<u64> {
    let mut rng = seeds.stream("parity-net");
    let mut mismatches = 0;
    for k in 0..secrets {
        let s = if k == 0 { BitVector::zeros(n) } else { BitVector::from_bools((0..n).map(|_| rng.random_bool(0.5))) };
        let net: Mlp<f64> = build_parity_network(&s)?;
        for x in 0..1u64 << n {
            let xv = BitVector::from_words(n, vec![x]);
            if net.predict_bits(xv.words()) != dot_parity(&s, &xv)? {
                mismatches += 1;
            }
        }
    }
    Ok(mismatches)
}

fn objective(model: &Mlp<f64>, inputs: &BitMatrix, labels: &BitVector, loss: Loss, reg: Regularizer) -> Result<f64> {
    Ok(model.mean_loss(inputs, labels, loss)? + regularizer_eval(reg, model))
}

/// Largest relative error between backprop and central differences over
/// `trials` random models, batches, losses and regularizers in `f64`.
pub fn gradient_check(trials: usize, seeds: &SeedTree) -> Result<f64> {
    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-6;
    let hidden_acts = [Activation::Relu, Activation::Sigmoid, Activation::Cosine, Activation::Identity];
    let losses = [Loss::Logistic, Loss::Mse, Loss::Mae];
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = seeds.indexed("grad-check", t as u64).rng();
        let n = rng.random_range(2..=10);
        let depth = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=8)).collect();
        let act = hidden_acts[t % hidden_acts.len()];
        let loss = losses[t % losses.len()];
        let reg = match t % 3 {
            0 => Regularizer::None,
            1 => Regularizer::L2(1e-2),
            _ => Regularizer::L1(1e-2),
        };
        let mut model: Mlp<f64> = build_mlp(n, &hidden, act, &mut rng)?;
        let batch = rng.random_range(1..=16);
        let mut inputs = BitMatrix::with_capacity(n, batch);
        let mut labels = BitVector::zeros(batch);
        let mut row = vec![0u64; 1];
        for i in 0..batch {
            lpn::random_row(n, &mut rng, &mut row);
            inputs.push_row_words(&row);
            labels.set(i, rng.random_bool(0.5));
        }
        let analytic = model.backward(&inputs, &labels, loss, reg)?.values;
        for k in 0..model.param_count() {
            let w = model.params()[k];
            model.params_mut()[k] = w + H;
            let up = objective(&model, &inputs, &labels, loss, reg)?;
            model.params_mut()[k] = w - H;
            let down = objective(&model, &inputs, &labels, loss, reg)?;
            model.params_mut()[k] = w;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingCheck {
    pub tau: f64,
    pub deviation: f64,
    pub epsilon: f64,
    pub sensitivity: f64,
}

/// Compares clean and noisy MAE gradients of a one-hidden-layer sigmoid
/// network against the concentration bound at confidence `1 - delta`.
pub fn gradient_scaling(
    n: usize,
    width: usize,
    batch: usize,
    taus: &[f64],
    delta: f64,
    seeds: &SeedTree,
) -> Result<Vec<ScalingCheck>> {
    let model: Mlp<f64> = build_mlp(n, &[width], Activation::Sigmoid, &mut seeds.stream("scaling-model"))?;
    let secret = lpn::sample_secret(n, 0.25, &mut seeds.stream("scaling-secret"));
    let c = max_output_sensitivity(&model)?;
    let mut out = Vec::new();
    for (k, &tau) in taus.iter().enumerate() {
        let probe = gradient_scaling_probe(&model, &secret, batch, tau, &mut seeds.indexed("scaling", k as u64).rng())?;
        out.push(ScalingCheck {
            tau,
            deviation: probe.max_deviation(),
            epsilon: scaling_epsilon(n, width, c, tau, batch, delta),
            sensitivity: c,
        });
    }
    Ok(out)
}

/// Counts label and secret-recovery violations of the sparse-secret
/// rewrite over random small instances. Returns `(instances, violations)`.
pub fn sparse_secret_roundtrip(trials: usize, seeds: &SeedTree) -> Result<(usize, usize)> {
    let mut checked = 0;
    let mut violations = 0;
    for t in 0..trials {
        let mut rng = seeds.indexed("sparse-secret", t as u64).rng();
        let n = rng.random_range(1..=8);
        let m = rng.random_range(n + 1..=64);
        let tau = if t % 2 == 0 { 0.0 } else { 0.25 };
        let inst = LpnInstance::generate(n, tau, None, &mut rng)?;
        let s = inst.secret().expect("generated").clone();
        let data = inst.samples(m, &mut rng)?;
        let Ok((reduced, block)) = lpn::sparse_secret_transform(&data) else { continue };
        checked += 1;
        let errors: Vec<bool> =
            (0..data.len()).map(|i| data.label(i) ^ crate::gf2::parity_words(data.row(i), s.words())).collect();
        let e1 = BitVector::from_bools(block.consumed.iter().map(|&i| errors[i]));
        let e2: Vec<bool> = (0..data.len()).filter(|i| !block.consumed.contains(i)).map(|i| errors[i]).collect();
        for (k, &e) in e2.iter().enumerate() {
            if reduced.label(k) != crate::gf2::parity_words(reduced.row(k), e1.words()) ^ e {
                violations += 1;
            }
        }
        if lpn::recover_original_secret(&block, &e1)? != s {
            violations += 1;
        }
        if tau == 0.0 && lpn::recover_original_secret(&block, &BitVector::zeros(n))? != s {
            violations += 1;
        }
    }
    Ok((checked, violations))
}

#[derive(Clone, Debug, Serialize)]
pub struct PilingUp {
    pub rounds: u32,
    pub samples: usize,
    pub empirical: f64,
    pub predicted: f64,
    /// Binomial standard error of the empirical rate.
    pub sigma: f64,
}

/// Empirical noise after `rounds` BKW rounds on `m` samples.
pub fn piling_up(n: usize, block: usize, rounds: u32, tau: f64, m: usize, seeds: &SeedTree) -> Result<PilingUp> {
    let tree = seeds.indexed("piling-up", rounds as u64);
    let inst = LpnInstance::generate(n, tau, None, &mut tree.stream("secret"))?;
    let data = inst.samples(m, &mut tree.stream("data"))?;
    let reduced = bkw_reduce(&data, &BkwConfig::new(block, rounds as usize))?;
    let secret = reduced.secret().expect("secret carried through reduction").clone();
    let predicted = predicted_bkw_noise(tau, rounds);
    Ok(PilingUp {
        rounds,
        samples: reduced.len(),
        empirical: reduced.disagreement_rate(&secret)?,
        predicted,
        sigma: (predicted * (1.0 - predicted) / reduced.len() as f64).sqrt(),
    })
}

pub const CHECKS: [&str; 5] = ["parity-net", "grad-check", "grad-scaling", "sparse-secret", "piling-up"];

/// Runs one named check with its default parameters.
pub fn run(check: &str, seeds: &SeedTree) -> Result<CheckReport> {
    let report = |passed: bool, statistic: f64, tolerance: f64, detail: String| CheckReport {
        check: check.to_string(),
        passed,
        statistic,
        tolerance,
        detail,
    };
    Ok(match check {
        "parity-net" => {
            let bad = parity_network_mismatches(12, 20, seeds)?;
            report(bad == 0, bad as f64, 0.0, "n = 12, 20 secrets, all 4096 inputs".into())
        }
        "grad-check" => {
            let worst = gradient_check(50, seeds)?;
            report(worst < 1e-4, worst, 1e-4, "50 random models, central differences".into())
        }
        "grad-scaling" => {
            let rows = gradient_scaling(10, 32, 1 << 17, &[0.1, 0.3, 0.45], 0.01, seeds)?;
            let ratio = rows.iter().map(|r| r.deviation / r.epsilon).fold(0.0, f64::max);
            report(ratio < 1.0, ratio, 1.0, serde_json::to_string(&rows)?)
        }
        "sparse-secret" => {
            let (checked, bad) = sparse_secret_roundtrip(200, seeds)?;
            report(bad == 0, bad as f64, 0.0, format!("{checked} instances"))
        }
        "piling-up" => {
            let rows: Vec<PilingUp> =
                (1..=3).map(|a| piling_up(24, 4, a, 0.25, 1_000_000, seeds)).collect::<Result<_>>()?;
            let z = rows.iter().map(|r| (r.empirical - r.predicted).abs() / r.sigma).fold(0.0, f64::max);
            let endpoint = (rows[2].empirical - 0.498).abs();
            report(z <= 3.0 && endpoint <= 0.002, z, 3.0, serde_json::to_string(&rows)?)
        }
        other => {
            return Err(crate::Error::InvalidParameter(format!(
                "unknown check {other:?}; expected one of {}",
                CHECKS.join(", ")
            )))
        }
    })
}
