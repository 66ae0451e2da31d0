//! LPN instances, datasets, samplers and dataset-level reductions.
//!
//! A sample is a pair `(a, y)` with `y = <s, a> + e (mod 2)` and
//! `e ~ Bernoulli(tau)`. Datasets keep samples as the rows of a [`BitMatrix`],
//! with coordinate `i` of the secret matching column `i`.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::gf2::{self, parity_words, BitMatrix, BitVector};

/// Hamming weight used for sparse secrets: `floor(n * tau)`.
pub fn default_secret_weight(n: usize, tau: f64) -> usize {
    // guard against 0.29 * 100 = 28.999...
    ((n as f64) * tau + 1e-9).floor() as usize
}

pub fn check_noise(tau: f64) -> Result<()> {
    if (0.0..0.5).contains(&tau) {
        Ok(())
    } else {
        Err(Error::NoiseRate(tau))
    }
}

/// Uniform vector of length `n` with exactly `weight` ones.
pub fn sample_secret_with_weight<R: Rng + ?Sized>(n: usize, weight: usize, rng: &mut R) -> BitVector {
    assert!(weight <= n, "weight {weight} exceeds dimension {n}");
    let mut s = BitVector::zeros(n);
    for i in rand::seq::index::sample(rng, n, weight) {
        s.set(i, true);
    }
    s
}

/// Uniform secret of Hamming weight `floor(n * tau)`.
pub fn sample_secret<R: Rng + ?Sized>(n: usize, tau: f64, rng: &mut R) -> BitVector {
    sample_secret_with_weight(n, default_secret_weight(n, tau), rng)
}

/// Uniformly random row of `n` bits as packed words.
#[inline]
pub fn random_row<R: Rng + ?Sized>(n: usize, rng: &mut R, out: &mut [u64]) {
    for w in out.iter_mut() {
        *w = rng.next_u64();
    }
    let rem = n % 64;
    if rem != 0 {
        if let Some(last) = out.last_mut() {
            *last &= (1u64 << rem) - 1;
        }
    }
}

/// An LPN problem: dimension, noise rate and (for generated problems) the secret.
#[derive(Clone, Debug, PartialEq)]
pub struct LpnInstance {
    n: usize,
    tau: f64,
    secret: Option<BitVector>,
}

impl LpnInstance {
    pub fn new(n: usize, tau: f64, secret: Option<BitVector>) -> Result<Self> {
        check_noise(tau)?;
        if n == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if let Some(s) = &secret {
            if s.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: s.len() });
            }
        }
        Ok(Self { n, tau, secret })
    }

    /// Fresh instance whose secret has weight `weight` (default `floor(n * tau)`).
    pub fn generate<R: Rng + ?Sized>(n: usize, tau: f64, weight: Option<usize>, rng: &mut R) -> Result<Self> {
        check_noise(tau)?;
        let weight = weight.unwrap_or_else(|| default_secret_weight(n, tau));
        if weight > n {
            return Err(Error::InvalidParameter(format!("secret weight {weight} > n = {n}")));
        }
        let secret = sample_secret_with_weight(n, weight, rng);
        Self::new(n, tau, Some(secret))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn secret(&self) -> Option<&BitVector> {
        self.secret.as_ref()
    }

    /// `count` fresh samples from the oracle.
    pub fn samples<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Dataset> {
        let secret = self.secret.as_ref().ok_or(Error::MissingSecret)?;
        let mut inputs = BitMatrix::with_capacity(self.n, count);
        let mut labels = BitVector::zeros(count);
        let mut row = vec![0u64; self.n.div_ceil(64)];
        for i in 0..count {
            random_row(self.n, rng, &mut row);
            let noise = self.tau > 0.0 && rng.random_bool(self.tau);
            if parity_words(&row, secret.words()) ^ noise {
                labels.set(i, true);
            }
            inputs.push_row_words(&row);
        }
        Ok(Dataset {
            inputs,
            labels,
            meta: DatasetMeta { n: self.n, tau: self.tau, source: "oracle".into(), secret: Some(secret.clone()) },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub n: usize,
    pub tau: f64,
    pub source: String,
    /// Ground truth, known only to the harness.
    pub secret: Option<BitVector>,
}

/// `m` labeled samples of dimension `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: BitMatrix,
    labels: BitVector,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: BitMatrix, labels: BitVector, meta: DatasetMeta) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: inputs.rows(), found: labels.len() });
        }
        if inputs.cols() != meta.n {
            return Err(Error::DimensionMismatch { expected: meta.n, found: inputs.cols() });
        }
        if let Some(s) = &meta.secret {
            if s.len() != meta.n {
                return Err(Error::DimensionMismatch { expected: meta.n, found: s.len() });
            }
        }
        Ok(Self { inputs, labels, meta })
    }

    /// Labels are exact parities under `secret`.
    pub fn clean<R: Rng + ?Sized>(secret: &BitVector, count: usize, rng: &mut R) -> Dataset {
        let inst = LpnInstance { n: secret.len(), tau: 0.0, secret: Some(secret.clone()) };
        let mut d = inst.samples(count, rng).expect("instance has a secret");
        d.meta.source = "clean".into();
        d
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn tau(&self) -> f64 {
        self.meta.tau
    }

    pub fn inputs(&self) -> &BitMatrix {
        &self.inputs
    }

    pub fn labels(&self) -> &BitVector {
        &self.labels
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn secret(&self) -> Option<&BitVector> {
        self.meta.secret.as_ref()
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.meta.source = source.into();
        self
    }

    /// Drops the ground-truth secret.
    pub fn without_secret(mut self) -> Self {
        self.meta.secret = None;
        self
    }

    pub fn with_secret(mut self, secret: Option<BitVector>) -> Result<Self> {
        if let Some(s) = &secret {
            if s.len() != self.n() {
                return Err(Error::DimensionMismatch { expected: self.n(), found: s.len() });
            }
        }
        self.meta.secret = secret;
        Ok(self)
    }

    pub fn label(&self, i: usize) -> bool {
        self.labels.get(i)
    }

    pub fn row(&self, i: usize) -> &[u64] {
        self.inputs.row(i)
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        assert!(start <= end && end <= self.len());
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let inputs = self.inputs.select_rows(indices);
        let labels = BitVector::from_bools(indices.iter().map(|&i| self.labels.get(i)));
        Dataset { inputs, labels, meta: self.meta.clone() }
    }

    /// `(first k rows, remaining rows)`.
    pub fn split_at(&self, k: usize) -> (Dataset, Dataset) {
        (self.slice(0, k), self.slice(k, self.len()))
    }

    /// Fraction of rows whose label disagrees with `<candidate, x>`.
    pub fn disagreement_rate(&self, candidate: &BitVector) -> Result<f64> {
        if candidate.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), found: candidate.len() });
        }
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let wrong = self.count_disagreements(candidate, usize::MAX)?.expect("no limit");
        Ok(wrong as f64 / self.len() as f64)
    }

    /// Rows whose label disagrees with `<candidate, x>`, or `None` as soon as
    /// the count exceeds `limit`. Rows are scanned 64 at a time against one
    /// label word.
    pub fn count_disagreements(&self, candidate: &BitVector, limit: usize) -> Result<Option<usize>> {
        if candidate.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), found: candidate.len() });
        }
        let stride = self.inputs.stride();
        let rows = self.inputs.data();
        let s = candidate.words();
        let len = self.len();
        let mut wrong = 0usize;
        for (block, &label_word) in self.labels.words().iter().enumerate() {
            let start = block * 64;
            let count = (len - start).min(64);
            let mut predicted = 0u64;
            if stride == 1 {
                let s0 = s[0];
                for (k, &r) in rows[start..start + count].iter().enumerate() {
                    predicted |= (((r & s0).count_ones() & 1) as u64) << k;
                }
            } else {
                for k in 0..count {
                    let row = &rows[(start + k) * stride..(start + k + 1) * stride];
                    predicted |= (parity_words(row, s) as u64) << k;
                }
            }
            let mask = if count == 64 { u64::MAX } else { (1u64 << count) - 1 };
            wrong += ((predicted ^ label_word) & mask).count_ones() as usize;
            if wrong > limit {
                return Ok(None);
            }
        }
        Ok(Some(wrong))
    }

    /// Same inputs, labels replaced by exact parities under `secret`.
    pub fn relabeled(&self, secret: &BitVector) -> Result<Dataset> {
        if secret.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), found: secret.len() });
        }
        let labels = BitVector::from_bools((0..self.len()).map(|i| parity_words(self.row(i), secret.words())));
        let meta =
            DatasetMeta { tau: 0.0, source: "relabeled".into(), secret: Some(secret.clone()), ..self.meta.clone() };
        Ok(Dataset { inputs: self.inputs.clone(), labels, meta })
    }

    /// Writes the `LPN1` binary format. The secret is included only when
    /// `include_secret` is set and the dataset has one.
    pub fn write_to<W: Write>(&self, mut w: W, include_secret: bool) -> Result<()> {
        let n = self.n();
        let row_bytes = n.div_ceil(8);
        w.write_all(b"LPN1")?;
        w.write_all(&(u32::try_from(n).map_err(|_| Error::Format("n exceeds u32".into()))?).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.tau().to_le_bytes())?;
        match (&self.meta.secret, include_secret) {
            (Some(s), true) => {
                w.write_all(&[1])?;
                w.write_all(&s.to_bytes())?;
            }
            _ => w.write_all(&[0])?,
        }
        let mut buf = Vec::with_capacity(row_bytes * 4096);
        for i in 0..self.len() {
            buf.extend(self.row(i).iter().flat_map(|x| x.to_le_bytes()).take(row_bytes));
            if buf.len() >= row_bytes * 4096 {
                w.write_all(&buf)?;
                buf.clear();
            }
        }
        w.write_all(&buf)?;
        w.write_all(&self.labels.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"LPN1" {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let m = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::Format("m overflows usize".into()))?;
        r.read_exact(&mut b8)?;
        let tau = f64::from_le_bytes(b8);
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let row_bytes = n.div_ceil(8);
        let secret = match flag[0] {
            0 => None,
            1 => {
                let mut sb = vec![0u8; row_bytes];
                r.read_exact(&mut sb)?;
                Some(BitVector::from_bytes(n, &sb)?)
            }
            x => return Err(Error::Format(format!("bad secret flag {x}"))),
        };
        let stride = n.div_ceil(64);
        let mut data = Vec::with_capacity(m * stride);
        let mut rb = vec![0u8; row_bytes];
        for _ in 0..m {
            r.read_exact(&mut rb)?;
            for chunk in rb.chunks(8) {
                let mut buf = [0u8; 8];
                buf[..chunk.len()].copy_from_slice(chunk);
                data.push(u64::from_le_bytes(buf));
            }
            // rows of a multiple of 64 bits use every chunk; pad otherwise
            for _ in rb.len().div_ceil(8)..stride {
                data.push(0);
            }
        }
        let inputs = BitMatrix::from_row_words(m, n, data)?;
        let mut lb = vec![0u8; m.div_ceil(8)];
        r.read_exact(&mut lb)?;
        let labels = BitVector::from_bytes(m, &lb)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes".into()));
        }
        Dataset::new(inputs, labels, DatasetMeta { n, tau, source: "file".into(), secret })
    }

    pub fn save(&self, path: &std::path::Path, include_secret: bool) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f), include_secret)
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Dataset::read_from(std::io::BufReader::new(f))
    }
}

/// Size of the `LPN1` encoding.
pub fn encoded_len(n: usize, m: usize, has_secret: bool) -> usize {
    let rb = n.div_ceil(8);
    4 + 4 + 8 + 8 + 1 + if has_secret { rb } else { 0 } + m * rb + m.div_ceil(8)
}

/// The two data sources used by the training loop.
pub enum Sampler<'a, R> {
    /// Fresh samples from the instance on every call.
    Oracle { instance: LpnInstance, batch: usize, rng: R },
    /// Indices drawn i.i.d. with replacement from a fixed dataset.
    Batch { dataset: &'a Dataset, batch: usize, rng: R },
}

impl<'a, R: Rng> Sampler<'a, R> {
    pub fn oracle(instance: LpnInstance, batch: usize, rng: R) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if instance.secret().is_none() {
            return Err(Error::MissingSecret);
        }
        Ok(Sampler::Oracle { instance, batch, rng })
    }

    pub fn batch(dataset: &'a Dataset, batch: usize, rng: R) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Sampler::Batch { dataset, batch, rng })
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Sampler::Oracle { batch, .. } | Sampler::Batch { batch, .. } => *batch,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Sampler::Oracle { instance, .. } => instance.n(),
            Sampler::Batch { dataset, .. } => dataset.n(),
        }
    }

    pub fn get_data(&mut self) -> Result<Dataset> {
        match self {
            Sampler::Oracle { instance, batch, rng } => instance.samples(*batch, rng),
            Sampler::Batch { dataset, batch, rng } => batch_get_data(dataset, *batch, rng),
        }
    }
}

/// `count` rows drawn i.i.d. (with replacement) from `dataset`.
pub fn batch_get_data<R: Rng + ?Sized>(dataset: &Dataset, count: usize, rng: &mut R) -> Result<Dataset> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.len();
    let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..n)).collect();
    Ok(dataset.select(&idx))
}

/// Bookkeeping from [`sparse_secret_transform`] needed to map the transformed
/// secret back to the original one.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseBlock {
    /// Rows of the input dataset consumed as the invertible block, in order.
    pub consumed: Vec<usize>,
    /// Inverse of the consumed rows stacked as a matrix.
    pub block_inverse: BitMatrix,
    /// Labels of the consumed rows.
    pub consumed_labels: BitVector,
}

/// Rewrites `m` samples as `m - n` samples whose secret is the error vector of
/// the first `n` linearly independent samples.
///
/// With `R` the consumed rows (so `R s = y1 + e1`) and `Q = (R^-1)^T`, every
/// other sample `(a, y)` becomes `(Q a, <y1, Q a> + y)`, and the new label
/// equals `<e1, Q a> + e`.
pub fn sparse_secret_transform(dataset: &Dataset) -> Result<(Dataset, SparseBlock)> {
    let n = dataset.n();
    if dataset.len() <= n {
        return Err(Error::NotEnoughSamples(format!(
            "sparse-secret reduction needs more than n = {n} samples, got {}",
            dataset.len()
        )));
    }
    let rows = (0..dataset.len()).map(|i| dataset.inputs().row_vector(i));
    let consumed = gf2::first_independent(n, rows).map_err(|e| match e {
        gf2::Gf2Error::RankDeficient { rank, needed } => {
            Error::NotEnoughSamples(format!("samples span rank {rank} < {needed}; provide more samples"))
        }
        other => other.into(),
    })?;
    let block = dataset.inputs().select_rows(&consumed);
    let block_inverse = gf2::invert(&block)?;
    let q = block_inverse.transpose();
    let consumed_labels = BitVector::from_bools(consumed.iter().map(|&i| dataset.label(i)));
    // <y1, Q a> = <Q^T y1, a>
    let label_mask = block_inverse.mul_vec(&consumed_labels)?;

    let mut is_consumed = vec![false; dataset.len()];
    for &i in &consumed {
        is_consumed[i] = true;
    }
    let remaining = dataset.len() - n;
    let mut inputs = BitMatrix::with_capacity(n, remaining);
    let mut labels = BitVector::zeros(remaining);
    let mut k = 0;
    for i in 0..dataset.len() {
        if is_consumed[i] {
            continue;
        }
        let a = dataset.inputs().row_vector(i);
        let new_row = q.mul_vec(&a)?;
        let label = parity_words(label_mask.words(), a.words()) ^ dataset.label(i);
        inputs.push_row(&new_row)?;
        labels.set(k, label);
        k += 1;
    }
    let secret = match dataset.secret() {
        // e1 = R s + y1
        Some(s) => Some(block.mul_vec(s)?.xor(&consumed_labels)?),
        None => None,
    };
    let meta = DatasetMeta { n, tau: dataset.tau(), source: "sparse-secret".into(), secret };
    let out = Dataset::new(inputs, labels, meta)?;
    Ok((out, SparseBlock { consumed, block_inverse, consumed_labels }))
}

/// Maps a secret of the transformed problem (the consumed errors `e1`) back to
/// the original secret `s = R^-1 (y1 + e1)`.
pub fn recover_original_secret(block: &SparseBlock, transformed_secret: &BitVector) -> Result<BitVector> {
    let rhs = block.consumed_labels.xor(transformed_secret)?;
    Ok(block.block_inverse.mul_vec(&rhs)?)
}

/// Drops the last coordinate assuming its secret bit is `guess`:
/// `(x, y) -> (x[..n-1], y + x[n-1] * guess)`.
pub fn guess_transform(dataset: &Dataset, guess: bool) -> Result<Dataset> {
    let n = dataset.n();
    if n < 2 {
        return Err(Error::InvalidParameter("guess transform needs n >= 2".into()));
    }
    let suffix = BitVector::from_bools([guess]);
    enumerate_suffix(dataset, &suffix)
}

/// Drops the last `k = suffix.len()` coordinates assuming the secret ends with
/// `suffix` (bit `i` of `suffix` is secret coordinate `n - k + i`).
pub fn enumerate_suffix(dataset: &Dataset, suffix: &BitVector) -> Result<Dataset> {
    let n = dataset.n();
    let k = suffix.len();
    if k >= n {
        return Err(Error::InvalidParameter(format!("suffix width {k} must be below n = {n}")));
    }
    let keep = n - k;
    let mut inputs = BitMatrix::with_capacity(keep, dataset.len());
    let mut labels = BitVector::zeros(dataset.len());
    let stride = keep.div_ceil(64);
    let mut full_mask = BitVector::zeros(n);
    for i in 0..k {
        full_mask.set(keep + i, suffix.get(i));
    }
    let tail_mask = if keep.is_multiple_of(64) { u64::MAX } else { (1u64 << (keep % 64)) - 1 };
    let mut row = vec![0u64; stride];
    for i in 0..dataset.len() {
        let src = dataset.row(i);
        row.copy_from_slice(&src[..stride]);
        if let Some(last) = row.last_mut() {
            *last &= tail_mask;
        }
        inputs.push_row_words(&row);
        let shift = parity_words(src, full_mask.words());
        labels.set(i, dataset.label(i) ^ shift);
    }
    let secret = dataset.secret().map(|s| s.truncated(keep));
    let meta = DatasetMeta { n: keep, tau: dataset.tau(), source: format!("suffix{k}"), secret };
    Dataset::new(inputs, labels, meta)
}

/// Noiseless test set under a known secret.
pub fn make_clean_testset<R: Rng + ?Sized>(secret: &BitVector, count: usize, rng: &mut R) -> Dataset {
    Dataset::clean(secret, count, rng)
}

/// Default clean test-set size used by the abundant tuner.
pub const CLEAN_TESTSET_SIZE: usize = 131_072;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedTree;
    use proptest::prelude::*;

    fn rng(label: &str) -> crate::seed::Rng {
        SeedTree::new(11).stream(label)
    }

    #[test]
    fn secret_weights() {
        let mut r = rng("w");
        assert_eq!(sample_secret(20, 0.498, &mut r).count_ones(), 9);
        assert!(sample_secret(10, 0.05, &mut r).is_zero());
        assert_eq!(sample_secret(30, 0.2, &mut r).count_ones(), 6);
        assert_eq!(default_secret_weight(100, 0.29), 29);
    }

    #[test]
    fn noise_rate_validation() {
        assert!(LpnInstance::new(4, 0.6, None).is_err());
        assert!(LpnInstance::new(4, 0.5, None).is_err());
        assert!(LpnInstance::new(4, 0.0, None).is_ok());
        assert!(matches!(LpnInstance::new(4, 0.1, Some(BitVector::zeros(3))), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn oracle_noiseless_limit() {
        let mut r = rng("o1");
        let inst = LpnInstance::generate(12, 1e-9, Some(5), &mut r).unwrap();
        let d = inst.samples(1000, &mut r).unwrap();
        assert_eq!(d.disagreement_rate(inst.secret().unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn oracle_zero_secret_label_mean() {
        let mut r = rng("o2");
        let tau = 0.3;
        let inst = LpnInstance::new(10, tau, Some(BitVector::zeros(10))).unwrap();
        let b = 100_000;
        let d = inst.samples(b, &mut r).unwrap();
        let mean = d.labels().count_ones() as f64 / b as f64;
        let sigma = (tau * (1.0 - tau) / b as f64).sqrt();
        assert!((mean - tau).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn oracle_flip_rate() {
        let mut r = rng("o3");
        let inst = LpnInstance::generate(8, 0.25, None, &mut r).unwrap();
        let d = inst.samples(100_000, &mut r).unwrap();
        let rate = d.disagreement_rate(inst.secret().unwrap()).unwrap();
        assert!((rate - 0.25).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn oracle_flip_rate_million() {
        let mut r = rng("o4");
        let tau = 0.125;
        let inst = LpnInstance::generate(16, tau, None, &mut r).unwrap();
        let b = 1_000_000;
        let rate = inst.samples(b, &mut r).unwrap().disagreement_rate(inst.secret().unwrap()).unwrap();
        let sigma = (tau * (1.0 - tau) / b as f64).sqrt();
        assert!((rate - tau).abs() < 3.0 * sigma, "rate {rate}");
    }

    #[test]
    fn batch_sampler_one_row() {
        let mut r = rng("b1");
        let inst = LpnInstance::generate(6, 0.2, None, &mut r).unwrap();
        let d = inst.samples(1, &mut r).unwrap();
        let mut s = Sampler::batch(&d, 5, rng("b1s")).unwrap();
        let out = s.get_data().unwrap();
        assert_eq!(out.len(), 5);
        for i in 0..5 {
            assert_eq!(out.row(i), d.row(0));
            assert_eq!(out.label(i), d.label(0));
        }
    }

    #[test]
    fn batch_sampler_rejects_empty() {
        let d = Dataset::new(
            BitMatrix::zeros(0, 4),
            BitVector::zeros(0),
            DatasetMeta { n: 4, tau: 0.1, source: "t".into(), secret: None },
        )
        .unwrap();
        assert!(matches!(Sampler::batch(&d, 3, rng("e")), Err(Error::EmptyDataset)));
        assert!(matches!(batch_get_data(&d, 3, &mut rng("e")), Err(Error::EmptyDataset)));
    }

    #[test]
    fn batch_index_frequencies_are_uniform() {
        // chi-square over indices for 10^6 draws
        let n_rows = 100;
        let mut r = rng("chi");
        let draws = 1_000_000;
        let mut counts = vec![0u64; n_rows];
        for _ in 0..draws {
            counts[r.random_range(0..n_rows)] += 1;
        }
        // same code path as batch_get_data: index draws from the same rng type
        let expected = draws as f64 / n_rows as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // df = 99: mean 99, sd 14.07
        assert!(chi2 < 99.0 + 4.0 * 14.07, "chi2 {chi2}");

        // rows returned by the sampler are members of the source
        let inst = LpnInstance::generate(20, 0.1, None, &mut r).unwrap();
        let d = inst.samples(50, &mut r).unwrap();
        let rows: std::collections::HashSet<(Vec<u64>, bool)> =
            (0..d.len()).map(|i| (d.row(i).to_vec(), d.label(i))).collect();
        let out = batch_get_data(&d, 1000, &mut r).unwrap();
        assert!((0..out.len()).all(|i| rows.contains(&(out.row(i).to_vec(), out.label(i)))));
    }

    #[test]
    fn sampler_batch_index_chi_square() {
        // the sampler itself, with distinguishable rows
        let n_rows = 64;
        let mut inputs = BitMatrix::with_capacity(8, n_rows);
        for i in 0..n_rows {
            inputs.push_row_words(&[i as u64]);
        }
        let d = Dataset::new(
            inputs,
            BitVector::zeros(n_rows),
            DatasetMeta { n: 8, tau: 0.0, source: "t".into(), secret: None },
        )
        .unwrap();
        let mut s = Sampler::batch(&d, 1_000_000, rng("chi2")).unwrap();
        let out = s.get_data().unwrap();
        let mut counts = vec![0u64; n_rows];
        for i in 0..out.len() {
            counts[out.row(i)[0] as usize] += 1;
        }
        let expected = 1_000_000.0 / n_rows as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // df = 63: sd = sqrt(126)
        assert!(chi2 < 63.0 + 4.0 * 126f64.sqrt(), "chi2 {chi2}");
    }

    /// Oracle for the sparse-secret transform: recompute every error from the
    /// known secret and check `y_bar = <e1, a_bar> + e2` row by row.
    fn check_sparse_transform(n: usize, m: usize, tau: f64, seed: u64) {
        let mut r = SeedTree::new(seed).stream("sparse-secret");
        let inst = LpnInstance::generate(n, tau, Some(r.random_range(0..=n)), &mut r).unwrap();
        let s = inst.secret().unwrap().clone();
        let d = inst.samples(m, &mut r).unwrap();
        let errors: Vec<bool> = (0..m).map(|i| parity_words(d.row(i), s.words()) != d.label(i)).collect();
        let (t, block) = match sparse_secret_transform(&d) {
            Ok(x) => x,
            Err(Error::NotEnoughSamples(_)) => return,
            Err(e) => panic!("{e}"),
        };
        assert_eq!(block.consumed.len(), n);
        assert_eq!(t.len(), m - n);
        let e1 = BitVector::from_bools(block.consumed.iter().map(|&i| errors[i]));
        assert_eq!(t.secret(), Some(&e1));
        let rest: Vec<usize> = (0..m).filter(|i| !block.consumed.contains(i)).collect();
        for (k, &i) in rest.iter().enumerate() {
            let expected = parity_words(t.row(k), e1.words()) ^ errors[i];
            assert_eq!(t.label(k), expected, "row {k}");
        }
        assert_eq!(recover_original_secret(&block, &e1).unwrap(), s);
    }

    #[test]
    fn sparse_transform_noiseless_has_zero_secret() {
        let mut r = rng("l1");
        let inst = LpnInstance::generate(6, 0.0, Some(3), &mut r).unwrap();
        let d = inst.samples(30, &mut r).unwrap();
        let (t, block) = sparse_secret_transform(&d).unwrap();
        assert!(t.secret().unwrap().is_zero());
        assert!(t.labels().is_zero());
        assert_eq!(recover_original_secret(&block, &BitVector::zeros(6)).unwrap(), *inst.secret().unwrap());
    }

    #[test]
    fn sparse_transform_brute_force() {
        check_sparse_transform(4, 12, 0.25, 1);
        for seed in 0..50 {
            check_sparse_transform(1 + (seed as usize % 8), 64, if seed % 2 == 0 { 0.0 } else { 0.25 }, seed);
        }
    }

    #[test]
    fn sparse_transform_full_round_trip() {
        let mut r = rng("l2");
        let inst = LpnInstance::generate(6, 0.2, None, &mut r).unwrap();
        let s = inst.secret().unwrap();
        let d = inst.samples(40, &mut r).unwrap();
        let (t, block) = sparse_secret_transform(&d).unwrap();
        let e1 = t.secret().unwrap().clone();
        assert_eq!(&recover_original_secret(&block, &e1).unwrap(), s);

        // a wrong guess of e1 yields a candidate that fails on held-out data
        let mut wrong = e1.clone();
        wrong.flip(0);
        let bad = recover_original_secret(&block, &wrong).unwrap();
        assert_ne!(&bad, s);
        let holdout = inst.samples(2000, &mut r).unwrap();
        assert!(holdout.disagreement_rate(&bad).unwrap() > 0.4);
        assert!(holdout.disagreement_rate(s).unwrap() < 0.25);
    }

    #[test]
    fn sparse_transform_rank_deficient() {
        let inputs = BitMatrix::parse(&["110", "110", "000", "110"]).unwrap();
        let d =
            Dataset::new(inputs, BitVector::zeros(4), DatasetMeta { n: 3, tau: 0.1, source: "t".into(), secret: None })
                .unwrap();
        assert!(matches!(sparse_secret_transform(&d), Err(Error::NotEnoughSamples(_))));
    }

    fn exhaustive_dataset(n: usize, secret: &BitVector) -> Dataset {
        let rows: Vec<BitVector> = (0..1u64 << n).map(|x| BitVector::from_words(n, vec![x])).collect();
        let inputs = BitMatrix::from_rows(n, &rows).unwrap();
        let labels = BitVector::from_bools(rows.iter().map(|r| gf2::dot_parity(r, secret).unwrap()));
        Dataset::new(inputs, labels, DatasetMeta { n, tau: 0.0, source: "all".into(), secret: Some(secret.clone()) })
            .unwrap()
    }

    #[test]
    fn guess_transform_zero_keeps_labels() {
        let s = BitVector::parse("10110").unwrap();
        let d = exhaustive_dataset(5, &s);
        let t = guess_transform(&d, false).unwrap();
        assert_eq!(t.n(), 4);
        assert_eq!(t.labels(), d.labels());
        for i in 0..d.len() {
            assert_eq!(t.inputs().row_vector(i), d.inputs().row_vector(i).truncated(4));
        }
    }

    #[test]
    fn guess_transform_exhaustive() {
        for last in [false, true] {
            let mut s = BitVector::parse("11010").unwrap();
            s.set(4, last);
            let d = exhaustive_dataset(5, &s);
            let truncated = s.truncated(4);
            for g in [false, true] {
                let t = guess_transform(&d, g).unwrap();
                for i in 0..d.len() {
                    let x = d.inputs().row_vector(i);
                    let parity = gf2::dot_parity(&x.truncated(4), &truncated).unwrap();
                    if g == last {
                        assert_eq!(t.label(i), parity);
                    } else {
                        assert_eq!(t.label(i) != parity, x.get(4));
                    }
                    if !x.get(4) {
                        assert_eq!(t.label(i), d.label(i));
                    }
                }
            }
        }
        assert!(guess_transform(&exhaustive_dataset(1, &BitVector::zeros(1)), true).is_err());
    }

    #[test]
    fn suffix_enumeration_matches_repeated_guesses() {
        let mut r = rng("sfx");
        let inst = LpnInstance::generate(10, 0.2, None, &mut r).unwrap();
        let d = inst.samples(300, &mut r).unwrap();
        assert_eq!(enumerate_suffix(&d, &BitVector::zeros(0)).unwrap().labels(), d.labels());
        let suffix = BitVector::parse("101").unwrap();
        let direct = enumerate_suffix(&d, &suffix).unwrap();
        let mut step = d.clone();
        for i in (0..3).rev() {
            step = guess_transform(&step, suffix.get(i)).unwrap();
        }
        assert_eq!(direct.inputs(), step.inputs());
        assert_eq!(direct.labels(), step.labels());
    }

    #[test]
    fn suffix_down_to_one_dimension() {
        for n in 2..=6 {
            for sw in 0..(1u64 << n) {
                let s = BitVector::from_words(n, vec![sw]);
                let d = exhaustive_dataset(n, &s);
                let t = enumerate_suffix(&d, &s.slice(1, n - 1)).unwrap();
                assert_eq!(t.n(), 1);
                assert_eq!(t.disagreement_rate(&s.truncated(1)).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn clean_testset() {
        let mut r = rng("clean");
        let zero = make_clean_testset(&BitVector::zeros(9), 500, &mut r);
        assert!(zero.labels().is_zero());
        let s = sample_secret(24, 0.3, &mut r);
        let t = make_clean_testset(&s, CLEAN_TESTSET_SIZE, &mut r);
        assert_eq!(t.len(), 131_072);
        assert_eq!(t.disagreement_rate(&s).unwrap(), 0.0);
    }

    #[test]
    fn file_format_layout() {
        let mut r = rng("file");
        let inst = LpnInstance::generate(20, 0.3, None, &mut r).unwrap();
        let d = inst.samples(1000, &mut r).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf, true).unwrap();
        assert_eq!(buf.len(), encoded_len(20, 1000, true));
        assert_eq!(&buf[..4], b"LPN1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 20);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1000);
        assert_eq!(f64::from_le_bytes(buf[16..24].try_into().unwrap()), 0.3);
        assert_eq!(buf[24], 1);
        assert_eq!(&buf[25..28], &inst.secret().unwrap().to_bytes()[..]);
        assert_eq!(&buf[28..31], &d.inputs().row_vector(0).to_bytes()[..]);
        assert_eq!(encoded_len(20, 1_000_000, true), 4 + 4 + 8 + 8 + 1 + 3 + 3_000_000 + 125_000);

        let mut public = Vec::new();
        d.write_to(&mut public, false).unwrap();
        assert_eq!(public[24], 0);
        let back = Dataset::read_from(&public[..]).unwrap();
        assert!(back.secret().is_none());
        assert_eq!(back.labels(), d.labels());

        assert!(Dataset::read_from(&b"LPN2"[..]).is_err());
        buf.push(0);
        assert!(matches!(Dataset::read_from(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn disagreement_count_matches_rowwise(n in 1usize..140, m in 0usize..300, seed in any::<u64>(), limit in 0usize..200) {
            let mut r = SeedTree::new(seed).rng();
            let inst = LpnInstance::generate(n, 0.3, None, &mut r).unwrap();
            let d = inst.samples(m, &mut r).unwrap();
            let cand = sample_secret(n, 0.5, &mut r);
            let naive = (0..m).filter(|&i| d.label(i) != parity_words(d.row(i), cand.words())).count();
            prop_assert_eq!(d.count_disagreements(&cand, usize::MAX).unwrap(), Some(naive));
            let capped = d.count_disagreements(&cand, limit).unwrap();
            prop_assert_eq!(capped, (naive <= limit).then_some(naive));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn file_round_trip(n in 1usize..140, m in 0usize..70, seed in any::<u64>(), with_secret in any::<bool>()) {
            let mut r = SeedTree::new(seed).rng();
            let inst = LpnInstance::generate(n, 0.1, None, &mut r).unwrap();
            let d = inst.samples(m, &mut r).unwrap().with_source("file");
            let mut buf = Vec::new();
            d.write_to(&mut buf, with_secret).unwrap();
            prop_assert_eq!(buf.len(), encoded_len(n, m, with_secret));
            let back = Dataset::read_from(&buf[..]).unwrap();
            let expected = if with_secret { d.clone() } else { d.clone().without_secret() };
            prop_assert_eq!(back, expected);
        }
    }
}
