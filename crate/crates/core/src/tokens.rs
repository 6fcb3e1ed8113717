//! Token sequences, log-space categorical fields and Gumbel sampling.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::rng::{RngStream, SeedProvenance};

/// Finite stand-in for `log 0` in log-one-hot encodings and clamped
/// log-probabilities.
pub const LOG_FLOOR: f64 = -70.0;

/// Vocabulary of `size` data tokens `0..size`, optionally extended with an
/// absorbing mask token whose id is exactly `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    has_mask: bool,
}

impl Vocab {
    pub fn new(size: usize, has_mask: bool) -> Result<Self> {
        if size < 2 {
            return Err(DiceError::InvalidVocab(format!(
                "need at least 2 data tokens, got {size}"
            )));
        }
        Ok(Self { size, has_mask })
    }

    /// Number of data tokens `K`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn has_mask(&self) -> bool {
        self.has_mask
    }

    /// Width of a categorical over this vocabulary: `K`, or `K + 1` with a mask.
    pub fn alphabet(&self) -> usize {
        self.size + usize::from(self.has_mask)
    }

    pub fn mask_id(&self) -> Option<usize> {
        self.has_mask.then_some(self.size)
    }

    pub fn with_mask(self) -> Self {
        Self {
            has_mask: true,
            ..self
        }
    }

    pub fn data_only(self) -> Self {
        Self {
            has_mask: false,
            ..self
        }
    }
}

/// A length-`D` sequence of token ids over a [`Vocab`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<usize>,
    vocab: Vocab,
}

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, vocab: Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(DiceError::EmptySequence);
        }
        let alphabet = vocab.alphabet();
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= alphabet) {
            return Err(DiceError::TokenOutOfRange {
                position,
                token,
                alphabet,
            });
        }
        Ok(Self { tokens, vocab })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<usize> {
        self.tokens
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains_mask(&self) -> bool {
        match self.vocab.mask_id() {
            Some(mask) => self.tokens.contains(&mask),
            None => false,
        }
    }

    /// Re-tags the sequence with another vocabulary, validating every id.
    pub fn with_vocab(&self, vocab: Vocab) -> Result<Self> {
        Self::new(self.tokens.clone(), vocab)
    }

    /// Fraction of positions where `self` and `other` agree.
    pub fn hamming_similarity(&self, other: &TokenSeq) -> Result<f64> {
        if self.len() != other.len() {
            return Err(DiceError::ShapeMismatch {
                expected: (self.len(), 1),
                actual: (other.len(), 1),
            });
        }
        let same = self
            .tokens
            .iter()
            .zip(&other.tokens)
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / self.len() as f64)
    }

    /// Parses one line of space-separated decimal ids.
    pub fn parse_line(line: &str, vocab: Vocab) -> Result<Self> {
        let tokens = line
            .split_whitespace()
            .map(|word| {
                word.parse::<usize>()
                    .map_err(|e| DiceError::Parse(format!("token {word:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens, vocab)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Reads the token text format: one sequence per line, blank lines skipped.
pub fn read_token_text(text: &str, vocab: Vocab) -> Result<Vec<TokenSeq>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| TokenSeq::parse_line(l, vocab))
        .collect()
}

pub fn write_token_text(seqs: &[TokenSeq]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&s.to_string());
        out.push('\n');
    }
    out
}

/// A `rows x cols` real grid stored row-major. Rows are sequence positions,
/// columns are categories. Log-probability fields produced by this crate are
/// clamped below at `floor`; residual and perturbed fields carry the floor
/// only as metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitField {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    floor: f64,
}

fn check_floor(floor: f64) -> Result<()> {
    if !floor.is_finite() || floor > -60.0 {
        return Err(DiceError::InvalidFloor(floor));
    }
    Ok(())
}

impl LogitField {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, floor: f64) -> Result<Self> {
        check_floor(floor)?;
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(DiceError::ShapeMismatch {
                expected: (rows, cols),
                actual: (values.len() / cols.max(1), cols),
            });
        }
        Ok(Self {
            rows,
            cols,
            values,
            floor,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
            floor: LOG_FLOOR,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DiceError::InvalidDistribution("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat(), LOG_FLOOR)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, other_shape: (usize, usize)) -> Result<()> {
        if self.shape() != other_shape {
            return Err(DiceError::ShapeMismatch {
                expected: self.shape(),
                actual: other_shape,
            });
        }
        Ok(())
    }

    /// Entrywise combination of two equally shaped fields.
    pub fn zip_with(&self, other: &LogitField, f: impl Fn(f64, f64) -> f64) -> Result<LogitField> {
        self.check_shape(other.shape())?;
        Ok(LogitField {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            floor: self.floor,
        })
    }

    /// `self - other`, entrywise.
    pub fn sub(&self, other: &LogitField) -> Result<LogitField> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + g`, entrywise.
    pub fn perturbed(&self, g: &GumbelField) -> Result<LogitField> {
        self.check_shape(g.shape())?;
        let values = self.values.iter().zip(g.values()).map(|(a, b)| a + b).collect();
        LogitField::new(self.rows, self.cols, values, self.floor)
    }

    /// Per-row argmax, ties to the lowest column.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows).map(|i| argmax(self.row(i))).collect()
    }

    /// Per-row argmax restricted to the first `limit` columns.
    pub fn argmax_rows_within(&self, limit: usize) -> Vec<usize> {
        let limit = limit.min(self.cols);
        (0..self.rows).map(|i| argmax(&self.row(i)[..limit])).collect()
    }

    /// Probability mass of each row after exponentiation.
    pub fn row_masses(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.exp()).sum())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &LogitField) -> Result<f64> {
        self.check_shape(other.shape())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `ln p`, clamped below at `floor`; zero maps to `floor`.
pub fn floored_ln(p: f64, floor: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(floor)
    } else {
        floor
    }
}

/// Per-row log-sum-exp normalization followed by clamping at the floor.
pub fn log_normalize(f: &LogitField) -> LogitField {
    let mut out = f.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        // shift by the max first so large logits keep full precision
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            row.iter_mut().for_each(|v| *v = f.floor);
            continue;
        }
        let log_mass = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = ((*v - m) - log_mass).max(f.floor);
        }
    }
    out
}

/// Log of the one-hot encoding of `x` over its vocabulary's alphabet:
/// 0 at the observed token, `floor` elsewhere.
pub fn log_onehot(x: &TokenSeq, floor: f64) -> Result<LogitField> {
    check_floor(floor)?;
    let cols = x.vocab().alphabet();
    let mut values = vec![floor; x.len() * cols];
    for (i, &t) in x.tokens().iter().enumerate() {
        values[i * cols + t] = 0.0;
    }
    LogitField::new(x.len(), cols, values, floor)
}

/// A grid of i.i.d. standard Gumbel draws with the stream position they came
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelField {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    provenance: SeedProvenance,
}

impl GumbelField {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn provenance(&self) -> SeedProvenance {
        self.provenance
    }
}

/// One standard Gumbel draw, `-ln(-ln u)` with `u` kept inside `[eps, 1-eps]`.
pub fn standard_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    -(-u.ln()).ln()
}

pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut RngStream) -> GumbelField {
    let provenance = rng.provenance();
    let values = (0..rows * cols).map(|_| standard_gumbel(rng)).collect();
    GumbelField {
        rows,
        cols,
        values,
        provenance,
    }
}

/// Per-row `argmax(log_pi + g)`; the result is tagged with `vocab`, whose
/// alphabet must match the field width.
pub fn gumbel_argmax(log_pi: &LogitField, g: &GumbelField, vocab: Vocab) -> Result<TokenSeq> {
    log_pi.check_shape(g.shape())?;
    if log_pi.cols() != vocab.alphabet() {
        return Err(DiceError::ShapeMismatch {
            expected: (log_pi.rows(), vocab.alphabet()),
            actual: log_pi.shape(),
        });
    }
    let tokens = (0..log_pi.rows())
        .map(|i| {
            let perturbed: Vec<f64> = log_pi
                .row(i)
                .iter()
                .zip(g.row(i))
                .map(|(a, b)| a + b)
                .collect();
            argmax(&perturbed)
        })
        .collect();
    TokenSeq::new(tokens, vocab)
}
