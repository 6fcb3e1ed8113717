use std::collections::BTreeMap;

use rand::Rng;

use super::{Condition, CorruptionModel, DataModel, Denoiser, EmissionTable};
use crate::error::{DiceError, Result};
use crate::rng::RngStream;
use crate::tokens::{floored_ln, logsumexp, LogitField, TokenSeq, Vocab, LOG_FLOOR};

const STOCHASTIC_TOL: f64 = 1e-12;

/// First-order chain generating clean sequences left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    pub initial: Vec<f64>,
    /// Row-stochastic: `transition[from][to]`.
    pub transition: Vec<Vec<f64>>,
}

impl MarkovChain {
    fn validate(&self, k: usize, label: u32) -> Result<()> {
        let check_row = |row: &[f64], what: &str| -> Result<()> {
            if row.len() != k {
                return Err(DiceError::InvalidDistribution(format!(
                    "label {label}: {what} has {} entries, expected {k}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(DiceError::InvalidDistribution(format!(
                    "label {label}: {what} has a negative or non-finite entry"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(DiceError::InvalidDistribution(format!(
                    "label {label}: {what} sums to {total}"
                )));
            }
            Ok(())
        };
        check_row(&self.initial, "initial distribution")?;
        if self.transition.len() != k {
            return Err(DiceError::InvalidDistribution(format!(
                "label {label}: transition matrix has {} rows, expected {k}",
                self.transition.len()
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            check_row(row, &format!("transition row {i}"))?;
        }
        Ok(())
    }

    /// Scaled forward-backward with per-position emission likelihoods
    /// `emit[i][s]`. Returns `(log evidence, posterior marginals)`.
    pub fn forward_backward(&self, emit: &[Vec<f64>]) -> Option<(f64, Vec<Vec<f64>>)> {
        let k = self.initial.len();
        let len = emit.len();
        let mut alpha = vec![vec![0.0; k]; len];
        let mut scale = vec![0.0; len];
        for s in 0..k {
            alpha[0][s] = self.initial[s] * emit[0][s];
        }
        scale[0] = alpha[0].iter().sum();
        if scale[0] <= 0.0 {
            return None;
        }
        alpha[0].iter_mut().for_each(|v| *v /= scale[0]);
        for i in 1..len {
            for s in 0..k {
                let inflow: f64 = (0..k).map(|r| alpha[i - 1][r] * self.transition[r][s]).sum();
                alpha[i][s] = inflow * emit[i][s];
            }
            scale[i] = alpha[i].iter().sum();
            if scale[i] <= 0.0 {
                return None;
            }
            let c = scale[i];
            alpha[i].iter_mut().for_each(|v| *v /= c);
        }

        let mut beta = vec![vec![1.0; k]; len];
        for i in (0..len - 1).rev() {
            for r in 0..k {
                beta[i][r] = (0..k)
                    .map(|s| self.transition[r][s] * emit[i + 1][s] * beta[i + 1][s])
                    .sum::<f64>()
                    / scale[i + 1];
            }
        }

        let marginals = (0..len)
            .map(|i| {
                let mut row: Vec<f64> = (0..k).map(|s| alpha[i][s] * beta[i][s]).collect();
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= z);
                row
            })
            .collect();
        let log_evidence = scale.iter().map(|c| c.ln()).sum();
        Some((log_evidence, marginals))
    }
}

/// Per label, a Markov chain over `K` tokens generating length-`D` sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    vocab: Vocab,
    len: usize,
    chains: BTreeMap<u32, MarkovChain>,
}

impl MarkovSource {
    pub fn new(vocab: Vocab, len: usize, chains: BTreeMap<u32, MarkovChain>) -> Result<Self> {
        let vocab = vocab.data_only();
        if len == 0 {
            return Err(DiceError::EmptySequence);
        }
        if chains.is_empty() {
            return Err(DiceError::InvalidDistribution("no chains".into()));
        }
        for (&label, chain) in &chains {
            chain.validate(vocab.size(), label)?;
        }
        Ok(Self { vocab, len, chains })
    }

    pub fn chain(&self, label: u32) -> Result<&MarkovChain> {
        self.chains.get(&label).ok_or(DiceError::UnknownCondition(label))
    }
}

impl DataModel for MarkovSource {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn labels(&self) -> Vec<u32> {
        self.chains.keys().copied().collect()
    }

    fn log_likelihood(&self, x: &[usize], label: u32) -> Result<f64> {
        let chain = self.chain(label)?;
        if x.len() != self.len {
            return Ok(f64::NEG_INFINITY);
        }
        let mut lp = chain.initial[x[0]].ln();
        for w in x.windows(2) {
            lp += chain.transition[w[0]][w[1]].ln();
        }
        Ok(lp)
    }

    fn sample(&self, label: u32, rng: &mut RngStream) -> Result<TokenSeq> {
        let chain = self.chain(label)?;
        let draw = |probs: &[f64], rng: &mut RngStream| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (s, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return s;
                }
            }
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        };
        let mut tokens = Vec::with_capacity(self.len);
        tokens.push(draw(&chain.initial, rng));
        for i in 1..self.len {
            let prev = tokens[i - 1];
            tokens.push(draw(&chain.transition[prev], rng));
        }
        TokenSeq::new(tokens, self.vocab)
    }

    fn position_marginals(&self, label: u32) -> Result<Vec<Vec<f64>>> {
        let chain = self.chain(label)?;
        let k = self.vocab.size();
        let mut out = Vec::with_capacity(self.len);
        let mut current = chain.initial.clone();
        for _ in 0..self.len {
            out.push(current.clone());
            current = (0..k)
                .map(|s| (0..k).map(|r| current[r] * chain.transition[r][s]).sum())
                .collect();
        }
        Ok(out)
    }
}

/// Exact Bayes denoiser for a [`MarkovSource`]: positionwise posterior
/// marginals from forward-backward with the corruption kernel as emission.
#[derive(Debug, Clone)]
pub struct MarkovDenoiser {
    source: MarkovSource,
    model: CorruptionModel,
}

impl MarkovDenoiser {
    pub fn new(source: MarkovSource, model: CorruptionModel) -> Self {
        Self { source, model }
    }

    fn emissions(&self, x_t: &TokenSeq, table: &EmissionTable) -> Vec<Vec<f64>> {
        let k = self.source.vocab.size();
        x_t.tokens()
            .iter()
            .map(|&obs| (0..k).map(|s| table.log_prob(obs, s).exp()).collect())
            .collect()
    }
}

impl Denoiser for MarkovDenoiser {
    fn data_vocab(&self) -> Vocab {
        self.source.vocab
    }

    fn evaluate(&self, x_t: &TokenSeq, cond: Condition, t: usize) -> Result<LogitField> {
        let k = self.source.vocab.size();
        let len = self.source.len;
        if x_t.len() != len {
            return Err(DiceError::ShapeMismatch {
                expected: (len, k),
                actual: (x_t.len(), k),
            });
        }
        let table = self.model.emission_table(t, len, k)?;
        let emit = self.emissions(x_t, &table);
        let labels = match cond {
            Condition::Label(l) => vec![l],
            Condition::Unconditional => self.source.labels(),
        };
        let mut results = Vec::with_capacity(labels.len());
        for &label in &labels {
            if let Some(r) = self.source.chain(label)?.forward_backward(&emit) {
                results.push(r);
            }
        }
        if results.is_empty() {
            return Err(DiceError::ZeroLikelihood(format!("{cond:?}")));
        }
        let evidences: Vec<f64> = results.iter().map(|(e, _)| *e).collect();
        let lse = logsumexp(&evidences);
        let mut probs = vec![0.0; len * k];
        for (evidence, marginals) in &results {
            let w = (evidence - lse).exp();
            for (i, row) in marginals.iter().enumerate() {
                for (s, p) in row.iter().enumerate() {
                    probs[i * k + s] += w * p;
                }
            }
        }
        let values = probs.into_iter().map(|p| floored_ln(p, LOG_FLOOR)).collect();
        LogitField::new(len, k, values, LOG_FLOOR)
    }
}
