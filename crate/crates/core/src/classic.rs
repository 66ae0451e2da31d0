//! Classical decoders: pooled Gaussian elimination with a hypothesis test,
//! and the BKW block-elimination reduction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf2::{self, BitMatrix, BitVector};
use crate::lpn::{check_noise, Dataset, DatasetMeta};

/// Empirical error rate of `candidate` on `data` and whether it is at most
/// `threshold`.
pub fn hypothesis_test(candidate: &BitVector, data: &Dataset, threshold: f64) -> Result<(bool, f64)> {
    let rate = data.disagreement_rate(candidate)?;
    Ok((rate <= threshold, rate))
}

/// Number of held-out noisy rows used to accept a candidate in the moderate
/// setting: `2n / (1/2 - tau)^2`, rounded up.
pub fn moderate_test_size(n: usize, tau: f64) -> usize {
    (2.0 * n as f64 / (0.5 - tau).powi(2) - 1e-6).ceil() as usize
}

/// Accuracy a candidate must reach on `m1` held-out rows:
/// `1 - tau - sqrt(3 (1/2 - tau) n / m1)`.
pub fn moderate_accept_threshold(n: usize, tau: f64, m1: usize) -> f64 {
    1.0 - tau - (3.0 * (0.5 - tau) * n as f64 / m1 as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledGaussConfig {
    /// Rows drawn from when forming square systems.
    pub pool_size: usize,
    /// Rows used to test each candidate.
    pub test_size: usize,
    /// Accept a candidate whose test error rate is at most this.
    pub threshold: f64,
    /// Bound on square systems drawn, singular ones included.
    pub max_iterations: u64,
}

impl Default for PooledGaussConfig {
    fn default() -> Self {
        Self { pool_size: 131_072, test_size: 100_000, threshold: 0.45, max_iterations: 10_000_000 }
    }
}

impl PooledGaussConfig {
    /// Default sizes with the threshold halfway between `tau` and 1/2.
    pub fn for_noise(tau: f64) -> Self {
        Self { threshold: (tau + 0.5) / 2.0, ..Self::default() }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.pool_size < n {
            return Err(Error::NotEnoughSamples(format!("pool of {} rows is smaller than n = {n}", self.pool_size)));
        }
        if self.test_size == 0 {
            return Err(Error::InvalidParameter("hypothesis test needs at least one row".into()));
        }
        if !(self.threshold < 0.5) {
            return Err(Error::InvalidParameter(format!("threshold {} must be below 1/2", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussOutcome {
    pub candidate: Option<BitVector>,
    /// Test error rate of the accepted candidate.
    pub error_rate: Option<f64>,
    /// Square systems drawn, singular ones included.
    pub iterations: u64,
    /// Systems that were solvable, each followed by a hypothesis test.
    pub solved: u64,
    /// Pool rows forming the accepted system.
    pub draw: Vec<usize>,
}

/// Splits `data` into a pool (first `pool_size` rows) and a test set (next
/// `test_size` rows), then runs [`pooled_gauss_split`].
pub fn pooled_gauss<R: Rng + ?Sized>(data: &Dataset, cfg: &PooledGaussConfig, rng: &mut R) -> Result<GaussOutcome> {
    let need = cfg.pool_size + cfg.test_size;
    if data.len() < need {
        return Err(Error::NotEnoughSamples(format!(
            "pooled Gauss needs {} pool + {} test rows, got {}",
            cfg.pool_size,
            cfg.test_size,
            data.len()
        )));
    }
    let pool = data.slice(0, cfg.pool_size);
    let test = data.slice(cfg.pool_size, need);
    pooled_gauss_split(&pool, &test, cfg, rng)
}

/// Repeatedly solves `n` random pool rows as a square system and returns the
/// first solution whose error rate on `test` is at most the threshold.
pub fn pooled_gauss_split<R: Rng + ?Sized>(
    pool: &Dataset,
    test: &Dataset,
    cfg: &PooledGaussConfig,
    rng: &mut R,
) -> Result<GaussOutcome> {
    let n = pool.n();
    cfg.validate(n)?;
    if pool.len() < n {
        return Err(Error::NotEnoughSamples(format!("pool has {} rows, need at least n = {n}", pool.len())));
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if test.n() != n {
        return Err(Error::DimensionMismatch { expected: n, found: test.n() });
    }
    // bound on errors an accepted candidate may make
    let max_errors = (cfg.threshold * test.len() as f64).floor() as usize;
    let mut outcome = GaussOutcome { candidate: None, error_rate: None, iterations: 0, solved: 0, draw: Vec::new() };
    while outcome.iterations < cfg.max_iterations {
        outcome.iterations += 1;
        let mut draw = rand::seq::index::sample(rng, pool.len(), n).into_vec();
        draw.sort_unstable();
        let a = pool.inputs().select_rows(&draw);
        let y = BitVector::from_bools(draw.iter().map(|&i| pool.label(i)));
        let s = match gf2::solve_rows(&a, &y) {
            Ok(s) => s,
            Err(gf2::Gf2Error::Singular) => continue,
            Err(e) => return Err(e.into()),
        };
        outcome.solved += 1;
        if let Some(errors) = test.count_disagreements(&s, max_errors)? {
            outcome.error_rate = Some(errors as f64 / test.len() as f64);
            outcome.candidate = Some(s);
            outcome.draw = draw;
            break;
        }
    }
    Ok(outcome)
}

/// Noise rate after `rounds` BKW rounds that each XOR two samples:
/// `(1 - (1 - 2 tau)^(2^rounds)) / 2`.
pub fn predicted_bkw_noise(tau: f64, rounds: u32) -> f64 {
    (1.0 - (1.0 - 2.0 * tau).powf(2f64.powi(rounds as i32))) / 2.0
}

/// How samples sharing a bucket are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BkwPairing {
    /// Consecutive samples of a bucket are XORed in disjoint pairs, so every
    /// input feeds at most one output and output errors stay independent.
    #[default]
    DisjointPairs,
    /// Every sample of a bucket is XORed with the bucket's first sample,
    /// which is then discarded.
    Representative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BkwConfig {
    /// Coordinates eliminated per round.
    pub block: usize,
    pub rounds: usize,
    /// Upper bound on rows kept after each round.
    pub memory_cap: Option<usize>,
    pub pairing: BkwPairing,
}

impl BkwConfig {
    pub fn new(block: usize, rounds: usize) -> Self {
        Self { block, rounds, memory_cap: None, pairing: BkwPairing::default() }
    }
}

/// Bits `[start, start + len)` of a packed row, bit 0 of the result being
/// coordinate `start`.
fn bit_range(row: &[u64], start: usize, len: usize) -> u64 {
    debug_assert!(len <= 64);
    if len == 0 {
        return 0;
    }
    let (w, off) = (start / 64, start % 64);
    let mut v = row[w] >> off;
    if off + len > 64 {
        v |= row[w + 1] << (64 - off);
    }
    if len == 64 {
        v
    } else {
        v & ((1u64 << len) - 1)
    }
}

/// Runs `rounds` BKW rounds, each zeroing the last `block` remaining
/// coordinates by XORing samples that agree on them, then drops the
/// eliminated coordinates.
pub fn bkw_reduce(data: &Dataset, cfg: &BkwConfig) -> Result<Dataset> {
    let n = data.n();
    if cfg.block == 0 || cfg.block > 24 {
        return Err(Error::InvalidParameter(format!("block width {} must be in 1..=24", cfg.block)));
    }
    if cfg.block * cfg.rounds >= n {
        return Err(Error::InvalidParameter(format!(
            "{} rounds of {} coordinates leave nothing of n = {n}",
            cfg.rounds, cfg.block
        )));
    }
    check_noise(data.tau())?;
    let stride = data.inputs().stride();
    let mut rows: Vec<u64> = data.inputs().data().to_vec();
    let mut labels: Vec<bool> = (0..data.len()).map(|i| data.label(i)).collect();
    let mut remaining = n;
    for round in 0..cfg.rounds {
        let start = remaining - cfg.block;
        let buckets = 1usize << cfg.block;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); buckets];
        for i in 0..labels.len() {
            members[bit_range(&rows[i * stride..(i + 1) * stride], start, cfg.block) as usize].push(i);
        }
        let mut next_rows = Vec::with_capacity(rows.len() / 2 + stride);
        let mut next_labels = Vec::with_capacity(labels.len() / 2 + 1);
        let cap = cfg.memory_cap.unwrap_or(usize::MAX);
        let mut emit = |a: usize, b: usize| {
            if next_labels.len() < cap {
                next_rows.extend((0..stride).map(|k| rows[a * stride + k] ^ rows[b * stride + k]));
                next_labels.push(labels[a] ^ labels[b]);
            }
        };
        for bucket in &members {
            match cfg.pairing {
                BkwPairing::DisjointPairs => {
                    for pair in bucket.chunks_exact(2) {
                        emit(pair[0], pair[1]);
                    }
                }
                BkwPairing::Representative => {
                    if let Some((&rep, rest)) = bucket.split_first() {
                        for &i in rest {
                            emit(rep, i);
                        }
                    }
                }
            }
        }
        if next_labels.is_empty() {
            return Err(Error::NotEnoughSamples(format!("BKW round {} produced no samples", round + 1)));
        }
        rows = next_rows;
        labels = next_labels;
        remaining = start;
    }
    let m = labels.len();
    let full = BitMatrix::from_row_words(m, n, rows)?;
    let keep: Vec<usize> = (0..remaining).collect();
    let inputs = full.select_columns(&keep);
    let secret = data.secret().map(|s| s.truncated(remaining));
    let meta = DatasetMeta {
        n: remaining,
        tau: predicted_bkw_noise(data.tau(), cfg.rounds as u32),
        source: format!("bkw{}x{}", cfg.rounds, cfg.block),
        secret,
    };
    Dataset::new(inputs, BitVector::from_bools(labels), meta)
}
