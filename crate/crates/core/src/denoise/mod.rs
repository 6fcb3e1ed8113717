//! Denoisers: exact Bayes posteriors `p(x_0 | x_t, c)` over toy data
//! distributions, and classifier-free guidance.

mod fixture;
mod markov;
mod template;

use serde::{Deserialize, Serialize};

pub use fixture::{Fixture, FixtureModel, FixtureSpec, MarkovConditionSpec, TemplateConditionSpec, WeightedTemplate};
pub use markov::{MarkovChain, MarkovDenoiser, MarkovSource};
pub use template::{TemplateDenoiser, TemplateMixture};

use crate::error::{DiceError, Result};
use crate::maskgen::mask_count;
use crate::multinomial::cumulative_prob;
use crate::rng::RngStream;
use crate::schedules::{DiffusionSchedule, MaskSchedule};
use crate::tokens::{log_normalize, LogitField, TokenSeq, Vocab};

/// Conditioning signal. `Unconditional` marginalizes over all labels with a
/// uniform prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Label(u32),
    Unconditional,
}

impl Condition {
    /// Compact integer form used by record files: the label, or -1.
    pub fn to_code(self) -> i64 {
        match self {
            Condition::Label(l) => l as i64,
            Condition::Unconditional => -1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            -1 => Some(Condition::Unconditional),
            0..=0xFFFF_FFFF => Some(Condition::Label(code as u32)),
            _ => None,
        }
    }
}

/// Maps a noisy sequence, a condition and a step to row-normalized clean-token
/// log-probabilities (`D x K`).
pub trait Denoiser: Send + Sync {
    fn data_vocab(&self) -> Vocab;

    fn evaluate(&self, x_t: &TokenSeq, cond: Condition, t: usize) -> Result<LogitField>;
}

impl<T: Denoiser + ?Sized> Denoiser for Box<T> {
    fn data_vocab(&self) -> Vocab {
        (**self).data_vocab()
    }

    fn evaluate(&self, x_t: &TokenSeq, cond: Condition, t: usize) -> Result<LogitField> {
        (**self).evaluate(x_t, cond, t)
    }
}

/// How clean tokens were corrupted into `x_t`, seen position by position.
#[derive(Debug, Clone, PartialEq)]
pub enum CorruptionModel {
    /// Masked positions carry the mask id; every other position is clean.
    MaskToken,
    /// A schedule-determined fraction of positions was replaced by uniform
    /// random tokens. Each position is treated as replaced independently with
    /// that fraction as probability.
    RandomToken { schedule: MaskSchedule, steps: usize },
    /// Mask-and-replace multinomial marginal `q(x_t | x_0)`.
    Multinomial(DiffusionSchedule),
}

/// `log p(observed | clean)` for one step, indexed `[observed * K + clean]`
/// with observed states `0..=K` (`K` is the mask).
#[derive(Debug, Clone)]
pub struct EmissionTable {
    k: usize,
    log_probs: Vec<f64>,
}

impl EmissionTable {
    pub fn log_prob(&self, observed: usize, clean: usize) -> f64 {
        self.log_probs[observed * self.k + clean]
    }
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl CorruptionModel {
    pub fn emission_table(&self, t: usize, len: usize, k: usize) -> Result<EmissionTable> {
        let mut log_probs = vec![f64::NEG_INFINITY; (k + 1) * k];
        match self {
            CorruptionModel::MaskToken => {
                for clean in 0..k {
                    log_probs[clean * k + clean] = 0.0;
                    log_probs[k * k + clean] = 0.0;
                }
            }
            CorruptionModel::RandomToken { schedule, steps } => {
                if t > *steps {
                    return Err(DiceError::StepOutOfRange { step: t, max: *steps });
                }
                let q = mask_count(schedule, t, *steps, len)? as f64 / len as f64;
                for obs in 0..k {
                    for clean in 0..k {
                        let hit = if obs == clean { 1.0 - q } else { 0.0 };
                        log_probs[obs * k + clean] = ln_or_neg_inf(hit + q / k as f64);
                    }
                }
            }
            CorruptionModel::Multinomial(sched) => {
                if sched.num_classes() != k {
                    return Err(DiceError::InvalidSchedule(format!(
                        "schedule has K={}, denoiser has K={k}",
                        sched.num_classes()
                    )));
                }
                for obs in 0..=k {
                    for clean in 0..k {
                        log_probs[obs * k + clean] = ln_or_neg_inf(cumulative_prob(sched, t, obs, clean)?);
                    }
                }
            }
        }
        Ok(EmissionTable { k, log_probs })
    }
}

/// `uncond + scale * (cond - uncond)`, log-normalized per row.
pub fn cfg_combine(cond: &LogitField, uncond: &LogitField, scale: f64) -> Result<LogitField> {
    let mixed = uncond.zip_with(cond, |u, c| u + scale * (c - u))?;
    Ok(log_normalize(&mixed))
}

/// Denoiser output under `cond`, guided against the unconditional prediction
/// when `scale != 1`.
pub fn guided_logits(
    denoiser: &dyn Denoiser,
    x_t: &TokenSeq,
    cond: Condition,
    t: usize,
    scale: f64,
) -> Result<LogitField> {
    let conditional = denoiser.evaluate(x_t, cond, t)?;
    if scale == 1.0 || cond == Condition::Unconditional {
        return Ok(conditional);
    }
    let unconditional = denoiser.evaluate(x_t, Condition::Unconditional, t)?;
    cfg_combine(&conditional, &unconditional, scale)
}

/// A fully specified distribution over clean sequences, one per label.
pub trait DataModel: Send + Sync {
    fn vocab(&self) -> Vocab;

    fn seq_len(&self) -> usize;

    fn labels(&self) -> Vec<u32>;

    /// `log p(x | label)`; `-inf` outside the support.
    fn log_likelihood(&self, x: &[usize], label: u32) -> Result<f64>;

    fn sample(&self, label: u32, rng: &mut RngStream) -> Result<TokenSeq>;

    /// `p(x_i = k | label)` for every position.
    fn position_marginals(&self, label: u32) -> Result<Vec<Vec<f64>>>;
}

/// Posterior over labels for a clean sequence under a uniform label prior.
/// Sequences outside every support get all-zero weights.
pub fn label_posterior(model: &dyn DataModel, x: &[usize]) -> Result<Vec<(u32, f64)>> {
    let labels = model.labels();
    let logs = labels
        .iter()
        .map(|&l| model.log_likelihood(x, l))
        .collect::<Result<Vec<_>>>()?;
    let lse = crate::tokens::logsumexp(&logs);
    Ok(labels
        .into_iter()
        .zip(logs)
        .map(|(l, lp)| {
            let p = if lse == f64::NEG_INFINITY { 0.0 } else { (lp - lse).exp() };
            (l, p)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_codes_round_trip() {
        for c in [Condition::Label(0), Condition::Label(7), Condition::Unconditional] {
            assert_eq!(Condition::from_code(c.to_code()), Some(c));
        }
        assert_eq!(Condition::from_code(-2), None);
    }

    #[test]
    fn cfg_identities() {
        let cond = log_normalize(&LogitField::from_rows(&[vec![0.3, -1.2, 0.1], vec![-0.5, 2.0, 0.0]]).unwrap());
        let uncond = log_normalize(&LogitField::from_rows(&[vec![1.0, 0.0, -2.0], vec![0.2, 0.2, 0.2]]).unwrap());
        assert!(cfg_combine(&cond, &uncond, 1.0).unwrap().max_abs_diff(&cond).unwrap() < 1e-12);
        assert!(cfg_combine(&cond, &uncond, 0.0).unwrap().max_abs_diff(&uncond).unwrap() < 1e-12);
        let strong = cfg_combine(&cond, &uncond, 10.0).unwrap();
        for m in strong.row_masses() {
            assert!((m - 1.0).abs() < 1e-9);
        }
        let other = LogitField::filled(3, 3, 0.0);
        assert!(cfg_combine(&cond, &other, 2.0).is_err());
    }

    #[test]
    fn random_token_emissions_normalize_over_observations() {
        let model = CorruptionModel::RandomToken {
            schedule: MaskSchedule::default(),
            steps: 10,
        };
        let table = model.emission_table(4, 5, 6).unwrap();
        for clean in 0..6 {
            let mass: f64 = (0..6).map(|obs| table.log_prob(obs, clean).exp()).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }
}
