//! Bit-packed linear algebra over GF(2).
//!
//! Vectors are packed into `u64` words, little-endian within a word: bit `i`
//! lives in word `i / 64` at position `i % 64`. Matrices are row-major with
//! every row padded to a whole number of words. Bits past the logical length
//! are always zero, so word-level AND + popcount gives inner products directly.

use std::fmt;

use thiserror::Error;

const WORD_BITS: usize = 64;

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Gf2Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("matrix has rank {rank}, need {needed}")]
    RankDeficient { rank: usize, needed: usize },
    #[error("invalid bit string: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Gf2Error>;

/// A fixed-length vector over GF(2).
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector {
    len: usize,
    words: Vec<u64>,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        Self { len, words: vec![0; words_for(len)] }
    }

    /// Builds a vector from words, clearing anything past `len`.
    pub fn from_words(len: usize, mut words: Vec<u64>) -> Self {
        words.resize(words_for(len), 0);
        let mut v = Self { len, words };
        v.clear_tail();
        v
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut words = Vec::new();
        let mut len = 0;
        for b in bits {
            if len % WORD_BITS == 0 {
                words.push(0);
            }
            if b {
                words[len / WORD_BITS] |= 1 << (len % WORD_BITS);
            }
            len += 1;
        }
        Self { len, words }
    }

    /// Parses a string of `0`/`1` characters; the first character is bit 0.
    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .filter(|c| !c.is_whitespace() && *c != '_')
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Gf2Error::Parse(format!("unexpected character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_bools)
    }

    pub fn unit(len: usize, index: usize) -> Self {
        let mut v = Self::zeros(len);
        v.set(index, true);
        v
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u64 << (i % WORD_BITS);
        if value {
            self.words[i / WORD_BITS] |= mask;
        } else {
            self.words[i / WORD_BITS] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.words[i / WORD_BITS] ^= 1 << (i % WORD_BITS);
    }

    pub fn push(&mut self, value: bool) {
        if self.len.is_multiple_of(WORD_BITS) {
            self.words.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, value);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn first_one(&self) -> Option<usize> {
        self.words.iter().enumerate().find(|(_, w)| **w != 0).map(|(i, w)| i * WORD_BITS + w.trailing_zeros() as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// Indices of set bits, ascending.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rest = w;
            std::iter::from_fn(move || {
                if rest == 0 {
                    None
                } else {
                    let tz = rest.trailing_zeros() as usize;
                    rest &= rest - 1;
                    Some(wi * WORD_BITS + tz)
                }
            })
        })
    }

    pub fn xor_assign(&mut self, other: &BitVector) -> Result<()> {
        check_len(self.len, other.len)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
        Ok(())
    }

    pub fn xor(&self, other: &BitVector) -> Result<BitVector> {
        let mut out = self.clone();
        out.xor_assign(other)?;
        Ok(out)
    }

    /// First `len` bits.
    pub fn truncated(&self, len: usize) -> BitVector {
        assert!(len <= self.len);
        let words = self.words[..words_for(len)].to_vec();
        BitVector::from_words(len, words)
    }

    /// Bits `[start, start + len)` as a new vector.
    pub fn slice(&self, start: usize, len: usize) -> BitVector {
        assert!(start + len <= self.len);
        BitVector::from_bools((start..start + len).map(|i| self.get(i)))
    }

    /// Appends `other` after the last bit of `self`.
    pub fn concat(&self, other: &BitVector) -> BitVector {
        BitVector::from_bools(self.iter().chain(other.iter()))
    }

    /// Little-endian byte packing: byte `k` holds bits `8k..8k+8`, bit 0 in the LSB.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.len.div_ceil(8);
        self.words.iter().flat_map(|w| w.to_le_bytes()).take(nbytes).collect()
    }

    pub fn from_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        let nbytes = len.div_ceil(8);
        if bytes.len() != nbytes {
            return Err(Gf2Error::DimensionMismatch { expected: nbytes, found: bytes.len() });
        }
        let words = bytes
            .chunks(8)
            .map(|chunk| {
                let mut buf = [0u8; 8];
                buf[..chunk.len()].copy_from_slice(chunk);
                u64::from_le_bytes(buf)
            })
            .collect();
        Ok(Self::from_words(len, words))
    }

    /// Hex of [`Self::to_bytes`].
    pub fn to_hex(&self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(len: usize, hex: &str) -> Result<Self> {
        let hex = hex.trim();
        if !hex.len().is_multiple_of(2) {
            return Err(Gf2Error::Parse("odd-length hex string".into()));
        }
        let bytes = (0..hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Gf2Error::Parse(e.to_string()))?;
        Self::from_bytes(len, &bytes)
    }

    fn clear_tail(&mut self) {
        let rem = self.len % WORD_BITS;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector({self})")
    }
}

impl fmt::Display for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Serialized as a bit string, coordinate 0 first.
impl serde::Serialize for BitVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for BitVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BitVector::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[inline]
fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Gf2Error::DimensionMismatch { expected, found })
    }
}

/// Parity of the AND of two equally long word slices.
#[inline]
pub fn parity_words(a: &[u64], b: &[u64]) -> bool {
    let mut acc = 0u64;
    for (x, y) in a.iter().zip(b) {
        acc ^= x & y;
    }
    acc.count_ones() & 1 == 1
}

/// Inner product `<a, b>` over GF(2).
pub fn dot_parity(a: &BitVector, b: &BitVector) -> Result<bool> {
    check_len(a.len, b.len)?;
    Ok(parity_words(&a.words, &b.words))
}

/// A dense row-major matrix over GF(2).
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    stride: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let stride = words_for(cols);
        Self { rows, cols, stride, data: vec![0; rows * stride] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    /// An empty matrix with `cols` columns, ready for [`Self::push_row`].
    pub fn with_capacity(cols: usize, rows: usize) -> Self {
        let stride = words_for(cols);
        Self { rows: 0, cols, stride, data: Vec::with_capacity(rows * stride) }
    }

    pub fn from_rows(cols: usize, rows: &[BitVector]) -> Result<Self> {
        let mut m = Self::with_capacity(cols, rows.len());
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Parses rows of `0`/`1` strings, e.g. `["11", "01"]`.
    pub fn parse(rows: &[&str]) -> Result<Self> {
        let vecs = rows.iter().map(|r| BitVector::parse(r)).collect::<Result<Vec<_>>>()?;
        let cols = vecs.first().map_or(0, BitVector::len);
        Self::from_rows(cols, &vecs)
    }

    /// Builds from raw row words; bits past `cols` are cleared.
    pub fn from_row_words(rows: usize, cols: usize, mut data: Vec<u64>) -> Result<Self> {
        let stride = words_for(cols);
        check_len(rows * stride, data.len())?;
        let rem = cols % WORD_BITS;
        if rem != 0 {
            let mask = (1u64 << rem) - 1;
            for r in 0..rows {
                data[r * stride + stride - 1] &= mask;
            }
        }
        Ok(Self { rows, cols, stride, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Words per row.
    #[inline]
    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn data(&self) -> &[u64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.stride..(r + 1) * self.stride]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [u64] {
        &mut self.data[r * self.stride..(r + 1) * self.stride]
    }

    pub fn row_vector(&self, r: usize) -> BitVector {
        BitVector { len: self.cols, words: self.row(r).to_vec() }
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[u64]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        assert!(r < self.rows && c < self.cols);
        (self.data[r * self.stride + c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        assert!(r < self.rows && c < self.cols);
        let idx = r * self.stride + c / WORD_BITS;
        let mask = 1u64 << (c % WORD_BITS);
        if value {
            self.data[idx] |= mask;
        } else {
            self.data[idx] &= !mask;
        }
    }

    pub fn push_row(&mut self, row: &BitVector) -> Result<()> {
        check_len(self.cols, row.len)?;
        self.data.extend_from_slice(&row.words);
        self.rows += 1;
        Ok(())
    }

    /// Appends a row given as raw words (must already respect the tail invariant).
    pub fn push_row_words(&mut self, words: &[u64]) {
        assert_eq!(words.len(), self.stride);
        self.data.extend_from_slice(words);
        self.rows += 1;
    }

    pub fn select_rows(&self, indices: &[usize]) -> BitMatrix {
        let mut m = Self::with_capacity(self.cols, indices.len());
        for &i in indices {
            m.push_row_words(self.row(i));
        }
        m
    }

    pub fn select_columns(&self, indices: &[usize]) -> BitMatrix {
        let mut m = Self::zeros(self.rows, indices.len());
        for r in 0..self.rows {
            for (k, &c) in indices.iter().enumerate() {
                if self.get(r, c) {
                    m.set(r, k, true);
                }
            }
        }
        m
    }

    pub fn column(&self, c: usize) -> BitVector {
        BitVector::from_bools((0..self.rows).map(|r| self.get(r, c)))
    }

    pub fn transpose(&self) -> BitMatrix {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            for (wi, &w) in row.iter().enumerate() {
                let mut rest = w;
                while rest != 0 {
                    let c = wi * WORD_BITS + rest.trailing_zeros() as usize;
                    rest &= rest - 1;
                    t.set(c, r, true);
                }
            }
        }
        t
    }

    /// `self * v`: bit `i` of the result is `<row_i, v>`.
    pub fn mul_vec(&self, v: &BitVector) -> Result<BitVector> {
        check_len(self.cols, v.len)?;
        Ok(BitVector::from_bools(self.iter_rows().map(|row| parity_words(row, &v.words))))
    }

    /// `v^T * self`: XOR of the rows selected by `v`.
    pub fn vec_mul(&self, v: &BitVector) -> Result<BitVector> {
        check_len(self.rows, v.len)?;
        let mut out = vec![0u64; self.stride];
        for r in v.ones() {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o ^= w;
            }
        }
        Ok(BitVector { len: self.cols, words: out })
    }

    pub fn mul(&self, other: &BitMatrix) -> Result<BitMatrix> {
        check_len(self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let sel = self.row_vector(r);
            let prod = other.vec_mul(&sel)?;
            out.row_mut(r).copy_from_slice(&prod.words);
        }
        Ok(out)
    }

    pub fn rank(&self) -> usize {
        let mut basis = XorBasis::new(self.cols);
        self.iter_rows().filter(|row| basis.insert_words(row)).count()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl fmt::Debug for BitMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BitMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {}", self.row_vector(r))?;
        }
        write!(f, "]")
    }
}

/// Incrementally maintained row-echelon basis, used for rank tracking.
#[derive(Clone, Debug)]
pub struct XorBasis {
    width: usize,
    // (pivot column, reduced vector); each vector has zeros at earlier pivots.
    vectors: Vec<(usize, Vec<u64>)>,
}

impl XorBasis {
    pub fn new(width: usize) -> Self {
        Self { width, vectors: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.vectors.len()
    }

    /// Inserts `v`; returns `true` if it was independent of the current span.
    pub fn insert_words(&mut self, v: &[u64]) -> bool {
        debug_assert_eq!(v.len(), words_for(self.width));
        let mut w = v.to_vec();
        for (pivot, b) in &self.vectors {
            if (w[pivot / WORD_BITS] >> (pivot % WORD_BITS)) & 1 == 1 {
                for (x, y) in w.iter_mut().zip(b) {
                    *x ^= y;
                }
            }
        }
        match first_one_words(&w) {
            Some(p) => {
                self.vectors.push((p, w));
                true
            }
            None => false,
        }
    }

    pub fn insert(&mut self, v: &BitVector) -> bool {
        assert_eq!(v.len, self.width);
        self.insert_words(&v.words)
    }
}

#[inline]
fn first_one_words(w: &[u64]) -> Option<usize> {
    w.iter().enumerate().find(|(_, x)| **x != 0).map(|(i, x)| i * WORD_BITS + x.trailing_zeros() as usize)
}

/// Solves `M s = y` for square `M` (row `i` of `M` is the coefficient vector of
/// equation `i`). Full Gauss-Jordan reduction; the pivot for column `c` is the
/// first remaining row with bit `c` set.
pub fn solve_rows(m: &BitMatrix, y: &BitVector) -> Result<BitVector> {
    let n = m.rows;
    if !m.is_square() {
        return Err(Gf2Error::DimensionMismatch { expected: m.rows, found: m.cols });
    }
    check_len(n, y.len)?;
    // augmented rows: n coefficient bits followed by the right-hand side bit
    let width = n + 1;
    let stride = words_for(width);
    let mut aug = vec![0u64; n * stride];
    for r in 0..n {
        aug[r * stride..r * stride + m.stride].copy_from_slice(m.row(r));
        if y.get(r) {
            aug[r * stride + n / WORD_BITS] |= 1 << (n % WORD_BITS);
        }
    }
    reduce_in_place(&mut aug, n, stride, n)?;
    let mut s = BitVector::zeros(n);
    for r in 0..n {
        if (aug[r * stride + n / WORD_BITS] >> (n % WORD_BITS)) & 1 == 1 {
            s.set(r, true);
        }
    }
    Ok(s)
}

/// Gauss-Jordan on `rows` packed rows of `stride` words, pivoting the first
/// `pivot_cols` columns. On success row `c` has its only pivot at column `c`.
fn reduce_in_place(data: &mut [u64], rows: usize, stride: usize, pivot_cols: usize) -> Result<()> {
    for c in 0..pivot_cols {
        let (wi, bit) = (c / WORD_BITS, 1u64 << (c % WORD_BITS));
        let pivot = (c..rows).find(|&r| data[r * stride + wi] & bit != 0).ok_or(Gf2Error::Singular)?;
        if pivot != c {
            for k in 0..stride {
                data.swap(pivot * stride + k, c * stride + k);
            }
        }
        let (head, tail) = data.split_at_mut(c * stride);
        let (prow, after) = tail.split_at_mut(stride);
        for other in head.chunks_exact_mut(stride).chain(after.chunks_exact_mut(stride)) {
            if other[wi] & bit != 0 {
                for (o, p) in other.iter_mut().zip(prow.iter()) {
                    *o ^= p;
                }
            }
        }
    }
    Ok(())
}

/// Solves `s^T A = y^T` for square `A`.
pub fn gauss_solve(a: &BitMatrix, y: &BitVector) -> Result<BitVector> {
    if !a.is_square() {
        return Err(Gf2Error::DimensionMismatch { expected: a.rows, found: a.cols });
    }
    solve_rows(&a.transpose(), y)
}

/// Inverse of a square matrix.
pub fn invert(a: &BitMatrix) -> Result<BitMatrix> {
    let n = a.rows;
    if !a.is_square() {
        return Err(Gf2Error::DimensionMismatch { expected: a.rows, found: a.cols });
    }
    // [A | I] with the identity starting at a word boundary
    let left = words_for(n);
    let stride = 2 * left;
    let mut aug = vec![0u64; n * stride];
    for r in 0..n {
        aug[r * stride..r * stride + left].copy_from_slice(a.row(r));
        aug[r * stride + left + r / WORD_BITS] |= 1 << (r % WORD_BITS);
    }
    reduce_in_place(&mut aug, n, stride, n)?;
    let mut inv = BitMatrix::zeros(n, n);
    for r in 0..n {
        inv.row_mut(r).copy_from_slice(&aug[r * stride + left..(r + 1) * stride]);
    }
    Ok(inv)
}

/// Greedy left-to-right choice of `n` linearly independent columns of an
/// `n x m` matrix. Returns the column indices and the inverse of that block.
pub fn select_invertible_block(a: &BitMatrix) -> Result<(Vec<usize>, BitMatrix)> {
    let n = a.rows;
    if a.cols < n {
        return Err(Gf2Error::RankDeficient { rank: a.cols.min(a.rank()), needed: n });
    }
    let columns = (0..a.cols).map(|c| a.column(c));
    let chosen = first_independent(n, columns)?;
    let block = a.select_columns(&chosen);
    let inv = invert(&block)?;
    Ok((chosen, inv))
}

/// Indices of the first `needed` independent vectors of width `needed`, in order.
pub fn first_independent<I>(needed: usize, vectors: I) -> Result<Vec<usize>>
where
    I: IntoIterator<Item = BitVector>,
{
    let mut basis = XorBasis::new(needed);
    let mut chosen = Vec::with_capacity(needed);
    for (i, v) in vectors.into_iter().enumerate() {
        if chosen.len() == needed {
            break;
        }
        if basis.insert(&v) {
            chosen.push(i);
        }
    }
    if chosen.len() < needed {
        return Err(Gf2Error::RankDeficient { rank: chosen.len(), needed });
    }
    Ok(chosen)
}
