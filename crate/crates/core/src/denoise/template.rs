use std::collections::BTreeMap;

use rand::Rng;

use super::{Condition, CorruptionModel, DataModel, Denoiser};
use crate::error::{DiceError, Result};
use crate::rng::RngStream;
use crate::tokens::{floored_ln, logsumexp, LogitField, TokenSeq, Vocab, LOG_FLOOR};

/// Per label, a finite list of template sequences with prior weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMixture {
    vocab: Vocab,
    len: usize,
    components: BTreeMap<u32, Vec<(Vec<usize>, f64)>>,
}

impl TemplateMixture {
    pub fn new(vocab: Vocab, components: BTreeMap<u32, Vec<(Vec<usize>, f64)>>) -> Result<Self> {
        let vocab = vocab.data_only();
        let len = components
            .values()
            .flat_map(|c| c.first())
            .map(|(t, _)| t.len())
            .next()
            .ok_or_else(|| DiceError::InvalidDistribution("no templates".into()))?;
        if len == 0 {
            return Err(DiceError::EmptySequence);
        }
        for (label, comps) in &components {
            if comps.is_empty() {
                return Err(DiceError::InvalidDistribution(format!("label {label} has no templates")));
            }
            let mut total = 0.0;
            for (tmpl, w) in comps {
                if tmpl.len() != len {
                    return Err(DiceError::InvalidDistribution(format!(
                        "label {label}: template length {} differs from {len}",
                        tmpl.len()
                    )));
                }
                TokenSeq::new(tmpl.clone(), vocab)?;
                if !(w.is_finite() && *w > 0.0) {
                    return Err(DiceError::InvalidDistribution(format!(
                        "label {label}: weight {w} must be positive"
                    )));
                }
                total += w;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(DiceError::InvalidDistribution(format!(
                    "label {label}: weights sum to {total}, expected 1"
                )));
            }
        }
        Ok(Self { vocab, len, components })
    }

    pub fn components(&self, label: u32) -> Result<&[(Vec<usize>, f64)]> {
        self.components
            .get(&label)
            .map(Vec::as_slice)
            .ok_or(DiceError::UnknownCondition(label))
    }

    /// Templates with log prior weights for a condition; unconditional mixes
    /// all labels uniformly.
    fn weighted(&self, cond: Condition) -> Result<Vec<(&[usize], f64)>> {
        match cond {
            Condition::Label(l) => Ok(self
                .components(l)?
                .iter()
                .map(|(t, w)| (t.as_slice(), w.ln()))
                .collect()),
            Condition::Unconditional => {
                let label_prior = -(self.components.len() as f64).ln();
                Ok(self
                    .components
                    .values()
                    .flatten()
                    .map(|(t, w)| (t.as_slice(), w.ln() + label_prior))
                    .collect())
            }
        }
    }

    /// Posterior weight of each template given an observation, as
    /// `(template, probability)` pairs.
    pub fn template_posterior(
        &self,
        x_t: &TokenSeq,
        cond: Condition,
        model: &CorruptionModel,
        t: usize,
    ) -> Result<Vec<(&[usize], f64)>> {
        if x_t.len() != self.len {
            return Err(DiceError::ShapeMismatch {
                expected: (self.len, self.vocab.size()),
                actual: (x_t.len(), self.vocab.size()),
            });
        }
        let k = self.vocab.size();
        let table = model.emission_table(t, self.len, k)?;
        let comps = self.weighted(cond)?;
        let logs: Vec<f64> = comps
            .iter()
            .map(|(tmpl, log_w)| {
                log_w
                    + x_t
                        .tokens()
                        .iter()
                        .zip(tmpl.iter())
                        .map(|(&obs, &clean)| table.log_prob(obs, clean))
                        .sum::<f64>()
            })
            .collect();
        let lse = logsumexp(&logs);
        if lse == f64::NEG_INFINITY {
            return Err(DiceError::ZeroLikelihood(format!("{cond:?}")));
        }
        Ok(comps
            .into_iter()
            .zip(logs)
            .map(|((tmpl, _), lp)| (tmpl, (lp - lse).exp()))
            .collect())
    }
}

impl DataModel for TemplateMixture {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn labels(&self) -> Vec<u32> {
        self.components.keys().copied().collect()
    }

    fn log_likelihood(&self, x: &[usize], label: u32) -> Result<f64> {
        let p: f64 = self
            .components(label)?
            .iter()
            .filter(|(t, _)| t.as_slice() == x)
            .map(|(_, w)| w)
            .sum();
        Ok(if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
    }

    fn sample(&self, label: u32, rng: &mut RngStream) -> Result<TokenSeq> {
        let comps = self.components(label)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (tmpl, w) in comps {
            acc += w;
            if u < acc {
                return TokenSeq::new(tmpl.clone(), self.vocab);
            }
        }
        TokenSeq::new(comps[comps.len() - 1].0.clone(), self.vocab)
    }

    fn position_marginals(&self, label: u32) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![vec![0.0; self.vocab.size()]; self.len];
        for (tmpl, w) in self.components(label)? {
            for (i, &tok) in tmpl.iter().enumerate() {
                out[i][tok] += w;
            }
        }
        Ok(out)
    }
}

/// Exact Bayes denoiser for a [`TemplateMixture`] under a known corruption:
/// `p(x0_i | x_t, c) = sum_m p(m | x_t, c) [template_m,i = x0_i]`.
#[derive(Debug, Clone)]
pub struct TemplateDenoiser {
    mixture: TemplateMixture,
    model: CorruptionModel,
}

impl TemplateDenoiser {
    pub fn new(mixture: TemplateMixture, model: CorruptionModel) -> Self {
        Self { mixture, model }
    }

    pub fn mixture(&self) -> &TemplateMixture {
        &self.mixture
    }
}

impl Denoiser for TemplateDenoiser {
    fn data_vocab(&self) -> Vocab {
        self.mixture.vocab
    }

    fn evaluate(&self, x_t: &TokenSeq, cond: Condition, t: usize) -> Result<LogitField> {
        let k = self.mixture.vocab.size();
        let len = self.mixture.len;
        let posterior = self.mixture.template_posterior(x_t, cond, &self.model, t)?;
        let mut probs = vec![0.0; len * k];
        for (tmpl, p) in posterior {
            for (i, &tok) in tmpl.iter().enumerate() {
                probs[i * k + tok] += p;
            }
        }
        let values = probs.into_iter().map(|p| floored_ln(p, LOG_FLOOR)).collect();
        LogitField::new(len, k, values, LOG_FLOOR)
    }
}
