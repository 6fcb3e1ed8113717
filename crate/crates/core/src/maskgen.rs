//! Masked generative modeling: mask plans, renoising and the iterative
//! predict/renoise sampler.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::{guided_logits, Condition, Denoiser};
use crate::error::{DiceError, Result};
use crate::rng::RngStream;
use crate::schedules::{MaskMode, MaskSchedule};
use crate::tokens::{gumbel_argmax, sample_gumbel, TokenSeq, Vocab};

/// What masked positions are filled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Uniform random data tokens, drawn once per plan.
    RandomToken,
    /// The absorbing mask id.
    MaskToken,
}

impl NoiseMode {
    pub fn code(self) -> u8 {
        match self {
            NoiseMode::RandomToken => 0,
            NoiseMode::MaskToken => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NoiseMode::RandomToken),
            1 => Some(NoiseMode::MaskToken),
            _ => None,
        }
    }
}

/// Number of masked positions at step `t` of `steps`: `round(r(t/T) * D)`,
/// halves rounded up.
pub fn mask_count(schedule: &MaskSchedule, t: usize, steps: usize, len: usize) -> Result<usize> {
    if steps == 0 || t > steps {
        return Err(DiceError::StepOutOfRange { step: t, max: steps });
    }
    let r = schedule.fraction(t as f64 / steps as f64)?;
    Ok(((r * len as f64 + 0.5).floor() as usize).min(len))
}

/// Masks `m_0..=m_T` and the noise token map shared by inversion and sampling.
/// `m_0` is always empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    schedule: MaskSchedule,
    mode: NoiseMode,
    masks: Vec<Vec<bool>>,
    noise: TokenSeq,
}

impl MaskPlan {
    /// Assembles a plan from stored parts, checking counts, inclusion and the
    /// noise map against the mode.
    pub fn from_parts(
        schedule: MaskSchedule,
        mode: NoiseMode,
        masks: Vec<Vec<bool>>,
        noise: TokenSeq,
    ) -> Result<Self> {
        let len = noise.len();
        let steps = masks.len().checked_sub(1).filter(|&s| s > 0).ok_or_else(|| {
            DiceError::InvalidParams("a mask plan needs at least one step".into())
        })?;
        for (t, m) in masks.iter().enumerate() {
            if m.len() != len {
                return Err(DiceError::InvalidParams(format!("mask {t} has length {}", m.len())));
            }
            let expected = mask_count(&schedule, t, steps, len)?;
            let actual = m.iter().filter(|&&b| b).count();
            if actual != expected {
                return Err(DiceError::InvalidParams(format!(
                    "mask {t} has {actual} positions, schedule requires {expected}"
                )));
            }
        }
        if schedule.mode == MaskMode::Inclusive {
            for t in 1..=steps {
                if masks[t - 1].iter().zip(&masks[t]).any(|(&a, &b)| a && !b) {
                    return Err(DiceError::InvalidParams(format!("mask {} is not contained in mask {t}", t - 1)));
                }
            }
        }
        match mode {
            NoiseMode::MaskToken => {
                let mask = noise.vocab().mask_id();
                if mask.is_none() || noise.tokens().iter().any(|&t| Some(t) != mask) {
                    return Err(DiceError::InvalidParams("mask-token plans need an all-mask noise map".into()));
                }
            }
            NoiseMode::RandomToken => {
                if noise.vocab().has_mask() {
                    return Err(DiceError::InvalidParams("random-token noise maps use data tokens only".into()));
                }
            }
        }
        Ok(Self {
            schedule,
            mode,
            masks,
            noise,
        })
    }

    pub fn schedule(&self) -> MaskSchedule {
        self.schedule
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn steps(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty()
    }

    /// `m_t` for `t` in `0..=T`.
    pub fn mask(&self, t: usize) -> &[bool] {
        &self.masks[t]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn noise(&self) -> &TokenSeq {
        &self.noise
    }

    /// Vocabulary of noisy states: data tokens, plus the mask in mask-token mode.
    pub fn state_vocab(&self) -> Vocab {
        self.noise.vocab()
    }

    pub fn fingerprint(&self) -> u64 {
        self.schedule.fingerprint(self.len(), self.steps())
    }
}

pub fn generate_mask_plan(
    schedule: MaskSchedule,
    mode: NoiseMode,
    data_vocab: Vocab,
    len: usize,
    steps: usize,
    rng: &mut RngStream,
) -> Result<MaskPlan> {
    if len == 0 {
        return Err(DiceError::EmptySequence);
    }
    if steps == 0 {
        return Err(DiceError::InvalidParams("a mask plan needs at least one step".into()));
    }
    let k = data_vocab.size();
    let noise = match mode {
        NoiseMode::RandomToken => {
            let tokens = (0..len).map(|_| rng.random_range(0..k)).collect();
            TokenSeq::new(tokens, data_vocab.data_only())?
        }
        NoiseMode::MaskToken => TokenSeq::new(vec![k; len], data_vocab.with_mask())?,
    };

    let counts = (0..=steps)
        .map(|t| mask_count(&schedule, t, steps, len))
        .collect::<Result<Vec<_>>>()?;
    let masks = match schedule.mode {
        MaskMode::Inclusive => {
            let mut order: Vec<usize> = (0..len).collect();
            order.shuffle(rng);
            counts
                .iter()
                .map(|&c| {
                    let mut m = vec![false; len];
                    for &pos in &order[..c] {
                        m[pos] = true;
                    }
                    m
                })
                .collect()
        }
        MaskMode::Random => counts
            .iter()
            .map(|&c| {
                let mut m = vec![false; len];
                for pos in index::sample(rng, len, c) {
                    m[pos] = true;
                }
                m
            })
            .collect(),
    };
    MaskPlan::from_parts(schedule, mode, masks, noise)
}

/// `x0_hat` outside `m_t`, the noise map inside it.
pub fn renoise(x0_hat: &TokenSeq, plan: &MaskPlan, t: usize) -> Result<TokenSeq> {
    if x0_hat.len() != plan.len() {
        return Err(DiceError::ShapeMismatch {
            expected: (plan.len(), 1),
            actual: (x0_hat.len(), 1),
        });
    }
    if t > plan.steps() {
        return Err(DiceError::StepOutOfRange {
            step: t,
            max: plan.steps(),
        });
    }
    let tokens = x0_hat
        .tokens()
        .iter()
        .zip(plan.noise.tokens())
        .zip(plan.mask(t))
        .map(|((&x, &n), &masked)| if masked { n } else { x })
        .collect();
    TokenSeq::new(tokens, plan.state_vocab())
}

/// Runs `t = start_t, ..., 1`: `propose(t, x_t)` yields a clean guess which is
/// renoised with `m_{t-1}`. Returns `x_0` over data tokens.
pub(crate) fn run_renoise_chain(
    plan: &MaskPlan,
    start: TokenSeq,
    start_t: usize,
    data_vocab: Vocab,
    mut propose: impl FnMut(usize, &TokenSeq) -> Result<TokenSeq>,
) -> Result<TokenSeq> {
    let mut x = start;
    for t in (1..=start_t).rev() {
        let guess = propose(t, &x)?;
        x = renoise(&guess, plan, t - 1)?;
    }
    x.with_vocab(data_vocab)
}

/// Plain iterative sampler: from `x_T = n`, predict, Gumbel-argmax and renoise
/// down to `t = 0`.
pub fn mgm_sample(
    denoiser: &dyn Denoiser,
    plan: &MaskPlan,
    cond: Condition,
    cfg_scale: f64,
    rng: &mut RngStream,
) -> Result<TokenSeq> {
    let data_vocab = denoiser.data_vocab();
    let start = plan.noise.clone();
    run_renoise_chain(plan, start, plan.steps(), data_vocab, |t, x_t| {
        let logits = guided_logits(denoiser, x_t, cond, t, cfg_scale)?;
        let g = sample_gumbel(logits.rows(), logits.cols(), rng);
        gumbel_argmax(&logits, &g, data_vocab)
    })
}
