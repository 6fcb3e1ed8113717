//! Inversion and editing for masked generative models and multinomial
//! diffusion.
//!
//! Inversion runs the model along a known trajectory towards the source
//! sequence and stores, per step, the residual between the logits that would
//! have produced the trajectory and the model's prediction. Editing replays
//! the reverse sampler, adding `lambda_1 * z_t` and `lambda_2 * g` to the
//! model's logits before the categorical decision.

mod mgm;
mod multinomial;
mod record;

use serde::{Deserialize, Serialize};

pub use mgm::{invert_mgm, invert_mgm_with_plan, edit_mgm, MgmPlanParams};
pub use multinomial::{edit_multinomial, invert_multinomial, sample_multinomial, sample_prior_state};
pub use record::{read_record, write_record, RECORD_MAGIC, RECORD_VERSION};

use crate::denoise::Condition;
use crate::error::{DiceError, Result};
use crate::maskgen::MaskPlan;
use crate::rng::SeedProvenance;
use crate::schedules::{LambdaDecay, LambdaSchedule};
use crate::tokens::{GumbelField, LogitField, TokenSeq, Vocab};

/// Euler-Mascheroni constant, the mean of a standard Gumbel.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Mgm,
    Multinomial,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Mgm => "mgm",
            Family::Multinomial => "multinomial",
        }
    }
}

/// How the residual and fresh noise are combined with the model logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// `base + l1 z + l2 g`
    Linear,
    /// `base + sqrt(l1) z + sqrt(l2) g`, with `l1 + l2 = 1`
    VariancePreserving,
    /// `base + max(l1 z, l2 g)`
    Max,
}

/// What the multinomial editor feeds into the compound posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CleanEstimate {
    /// The denoiser's full distribution over clean tokens.
    #[default]
    Distribution,
    /// A one-hot at the denoiser's most likely clean token.
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditParams {
    /// Start step as a fraction of `T`; mapped to `ceil(tau * T)`.
    pub tau: f64,
    pub lambdas: LambdaSchedule,
    pub strategy: Strategy,
    pub target: Condition,
    pub cfg_scale: f64,
    #[serde(default)]
    pub clean_estimate: CleanEstimate,
}

const VP_TOL: f64 = 1e-9;

impl EditParams {
    /// `tau = 1`, `lambda_1 = 1`, `lambda_2 = 0`, same condition, no guidance.
    pub fn reconstruction(cond: Condition) -> Self {
        Self {
            tau: 1.0,
            lambdas: LambdaSchedule::constant(1.0, 0.0),
            strategy: Strategy::Linear,
            target: cond,
            cfg_scale: 1.0,
            clean_estimate: CleanEstimate::Distribution,
        }
    }

    /// Residuals discarded, masked regions resampled with fresh noise.
    pub fn resample(cond: Condition) -> Self {
        Self {
            lambdas: LambdaSchedule::constant(0.0, 1.0),
            ..Self::reconstruction(cond)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && (0.0..=1.0).contains(&self.tau)) {
            return Err(DiceError::InvalidParams(format!("tau={} must lie in [0, 1]", self.tau)));
        }
        if !self.cfg_scale.is_finite() {
            return Err(DiceError::InvalidParams(format!("cfg scale {} is not finite", self.cfg_scale)));
        }
        self.lambdas.validate()?;
        if self.strategy == Strategy::VariancePreserving {
            if self.lambdas.decay != LambdaDecay::Constant {
                return Err(DiceError::InvalidParams(
                    "variance-preserving injection needs a constant lambda schedule".into(),
                ));
            }
            check_vp(self.lambdas.lambda1, self.lambdas.lambda2)?;
        }
        Ok(())
    }

    /// First reverse step, `ceil(tau * T)`, at least 1.
    pub fn start_step(&self, steps: usize) -> usize {
        let s = (self.tau * steps as f64 - 1e-9).ceil();
        (s.max(1.0) as usize).min(steps)
    }
}

fn check_vp(lambda1: f64, lambda2: f64) -> Result<()> {
    if (lambda1 + lambda2 - 1.0).abs() > VP_TOL {
        return Err(DiceError::InvalidParams(format!(
            "variance-preserving injection needs lambda1 + lambda2 = 1, got {}",
            lambda1 + lambda2
        )));
    }
    Ok(())
}

/// Combines model logits `base`, residual `z` and Gumbel noise `g`.
pub fn inject_noise(
    base: &LogitField,
    z: &LogitField,
    g: &GumbelField,
    lambda1: f64,
    lambda2: f64,
    strategy: Strategy,
) -> Result<LogitField> {
    base.check_shape(z.shape())?;
    base.check_shape(g.shape())?;
    let (w1, w2) = match strategy {
        Strategy::Linear | Strategy::Max => (lambda1, lambda2),
        Strategy::VariancePreserving => {
            check_vp(lambda1, lambda2)?;
            (lambda1.sqrt(), lambda2.sqrt())
        }
    };
    let values: Vec<f64> = base
        .values()
        .iter()
        .zip(z.values())
        .zip(g.values())
        .map(|((&b, &zv), &gv)| match strategy {
            Strategy::Max => b + (w1 * zv).max(w2 * gv),
            _ => b + w1 * zv + w2 * gv,
        })
        .collect();
    LogitField::new(base.rows(), base.cols(), values, base.floor())
}

/// Moment-matched Gumbel `(mu, beta)` for `lambda1 G1 + lambda2 G2` with
/// `G1 ~ Gumbel(mu1, beta1)`, `G2 ~ Gumbel(mu2, beta2)`.
pub fn gumbel_moment_match(
    mu1: f64,
    beta1: f64,
    mu2: f64,
    beta2: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, f64)> {
    if !(beta1 > 0.0 && beta2 > 0.0) {
        return Err(DiceError::InvalidParams(format!(
            "Gumbel scales must be positive, got {beta1} and {beta2}"
        )));
    }
    let beta = (lambda1 * lambda1 * beta1 * beta1 + lambda2 * lambda2 * beta2 * beta2).sqrt();
    let mu = lambda1 * mu1 + lambda2 * mu2 + EULER_GAMMA * (lambda1 * beta1 + lambda2 * beta2 - beta);
    Ok((mu, beta))
}

/// Everything needed to replay a source sequence through the reverse
/// sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionRecord {
    family: Family,
    condition: Condition,
    data_vocab: Vocab,
    /// `z_1..z_T`
    residuals: Vec<LogitField>,
    /// `x_1..x_T`
    trajectory: Vec<TokenSeq>,
    /// Masked models only: `y_0`, the denoiser's logits on the clean input.
    clean_logits: Option<LogitField>,
    plan: Option<MaskPlan>,
    seeds: Vec<SeedProvenance>,
    schedule_fingerprint: u64,
}

impl InversionRecord {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        family: Family,
        condition: Condition,
        data_vocab: Vocab,
        residuals: Vec<LogitField>,
        trajectory: Vec<TokenSeq>,
        clean_logits: Option<LogitField>,
        plan: Option<MaskPlan>,
        seeds: Vec<SeedProvenance>,
        schedule_fingerprint: u64,
    ) -> Result<Self> {
        let steps = residuals.len();
        if steps == 0 || trajectory.len() != steps {
            return Err(DiceError::MalformedRecord(format!(
                "{} residuals for {} trajectory states",
                steps,
                trajectory.len()
            )));
        }
        let len = trajectory[0].len();
        let width = residuals[0].cols();
        let expected_width = match family {
            Family::Mgm => data_vocab.size(),
            Family::Multinomial => data_vocab.size() + 1,
        };
        if width != expected_width {
            return Err(DiceError::MalformedRecord(format!(
                "residual width {width}, expected {expected_width}"
            )));
        }
        for z in &residuals {
            z.check_shape((len, width))?;
        }
        if trajectory.iter().any(|x| x.len() != len) {
            return Err(DiceError::MalformedRecord("ragged trajectory".into()));
        }
        match (family, &plan, &clean_logits) {
            (Family::Mgm, Some(plan), Some(y0)) => {
                if plan.steps() != steps || plan.len() != len {
                    return Err(DiceError::MalformedRecord("mask plan does not match the residuals".into()));
                }
                y0.check_shape((len, data_vocab.size()))?;
            }
            (Family::Multinomial, None, None) => {}
            _ => {
                return Err(DiceError::MalformedRecord(format!(
                    "{} record with unexpected sections",
                    family.name()
                )))
            }
        }
        Ok(Self {
            family,
            condition,
            data_vocab,
            residuals,
            trajectory,
            clean_logits,
            plan,
            seeds,
            schedule_fingerprint,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn data_vocab(&self) -> Vocab {
        self.data_vocab
    }

    pub fn steps(&self) -> usize {
        self.residuals.len()
    }

    pub fn seq_len(&self) -> usize {
        self.trajectory[0].len()
    }

    /// `z_t` for `t` in `1..=T`.
    pub fn residual(&self, t: usize) -> &LogitField {
        &self.residuals[t - 1]
    }

    pub fn residuals(&self) -> &[LogitField] {
        &self.residuals
    }

    /// `x_t` for `t` in `1..=T`.
    pub fn state(&self, t: usize) -> &TokenSeq {
        &self.trajectory[t - 1]
    }

    pub fn trajectory(&self) -> &[TokenSeq] {
        &self.trajectory
    }

    pub fn clean_logits(&self) -> Option<&LogitField> {
        self.clean_logits.as_ref()
    }

    pub fn plan(&self) -> Option<&MaskPlan> {
        self.plan.as_ref()
    }

    pub fn seeds(&self) -> &[SeedProvenance] {
        &self.seeds
    }

    pub fn schedule_fingerprint(&self) -> u64 {
        self.schedule_fingerprint
    }

    pub(crate) fn expect_family(&self, expected: Family) -> Result<()> {
        if self.family != expected {
            return Err(DiceError::FamilyMismatch {
                record: self.family.name(),
                expected: expected.name(),
            });
        }
        Ok(())
    }
}
