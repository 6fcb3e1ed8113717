use rand::Rng;

use super::{inject_noise, CleanEstimate, EditParams, Family, InversionRecord};
use crate::denoise::{guided_logits, Condition, Denoiser};
use crate::error::{DiceError, Result};
use crate::multinomial::{inference_posterior, q_sample, state_vocab};
use crate::rng::RngStream;
use crate::schedules::{lambda_at, DiffusionSchedule};
use crate::tokens::{log_onehot, sample_gumbel, LogitField, TokenSeq, Vocab, LOG_FLOOR};

fn check_schedule(sched: &DiffusionSchedule, denoiser: &dyn Denoiser) -> Result<Vocab> {
    let data_vocab = denoiser.data_vocab();
    if sched.num_classes() != data_vocab.size() {
        return Err(DiceError::InvalidSchedule(format!(
            "schedule has K={}, denoiser has K={}",
            sched.num_classes(),
            data_vocab.size()
        )));
    }
    Ok(data_vocab)
}

/// `log pi(x_{t-1} | x_t, c)` from the denoiser's clean-token prediction.
fn reverse_logits(
    sched: &DiffusionSchedule,
    denoiser: &dyn Denoiser,
    x_t: &TokenSeq,
    cond: Condition,
    t: usize,
    cfg_scale: f64,
    estimate: CleanEstimate,
) -> Result<LogitField> {
    let pred = guided_logits(denoiser, x_t, cond, t, cfg_scale)?;
    let pred = match estimate {
        CleanEstimate::Distribution => pred,
        CleanEstimate::Argmax => log_onehot(&TokenSeq::new(pred.argmax_rows(), denoiser.data_vocab())?, LOG_FLOOR)?,
    };
    inference_posterior(sched, t, x_t, &pred)
}

/// Draws an independent trajectory `x_t ~ q(x_t | x_0)` for every `t` and
/// stores `z_t = y_{t-1} - log pi(x_t, c, t)` with `y_t = log onehot(x_t)`.
pub fn invert_multinomial(
    x0: &TokenSeq,
    denoiser: &dyn Denoiser,
    cond: Condition,
    sched: &DiffusionSchedule,
    rng: &mut RngStream,
) -> Result<InversionRecord> {
    let data_vocab = check_schedule(sched, denoiser)?;
    if let Some(pos) = x0.tokens().iter().position(|&v| v >= data_vocab.size()) {
        return Err(DiceError::MaskInCleanData(pos));
    }
    let seed = rng.provenance();
    let vocab = state_vocab(sched)?;
    let steps = sched.steps();
    let mut trajectory = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = sample_gumbel(x0.len(), vocab.alphabet(), rng);
        trajectory.push(q_sample(sched, t, x0, &g)?);
    }
    let mut residuals = Vec::with_capacity(steps);
    let mut prev = log_onehot(&x0.with_vocab(vocab)?, LOG_FLOOR)?;
    for t in 1..=steps {
        let x_t = &trajectory[t - 1];
        let pi = reverse_logits(sched, denoiser, x_t, cond, t, 1.0, CleanEstimate::Distribution)?;
        residuals.push(prev.sub(&pi)?);
        prev = log_onehot(x_t, LOG_FLOOR)?;
    }
    InversionRecord::new(
        Family::Multinomial,
        cond,
        data_vocab,
        residuals,
        trajectory,
        None,
        None,
        vec![seed],
        sched.fingerprint(),
    )
}

/// Replays the reverse chain from `y_s = log onehot(x_s)`:
/// `y_{t-1} = log pi(argmax y_t, c') + inject(lambda_1 z_t, lambda_2 g)`.
/// The final decision is taken over data tokens only.
pub fn edit_multinomial(
    record: &InversionRecord,
    denoiser: &dyn Denoiser,
    sched: &DiffusionSchedule,
    params: &EditParams,
    rng: &mut RngStream,
) -> Result<TokenSeq> {
    record.expect_family(Family::Multinomial)?;
    params.validate()?;
    if sched.fingerprint() != record.schedule_fingerprint() {
        return Err(DiceError::ScheduleMismatch {
            record: record.schedule_fingerprint(),
            supplied: sched.fingerprint(),
        });
    }
    let data_vocab = check_schedule(sched, denoiser)?;
    let vocab = state_vocab(sched)?;
    let steps = record.steps();
    let start_t = params.start_step(steps);
    let mut y = log_onehot(record.state(start_t), LOG_FLOOR)?;
    for t in (1..=start_t).rev() {
        let x_t = TokenSeq::new(y.argmax_rows(), vocab)?;
        let base = reverse_logits(sched, denoiser, &x_t, params.target, t, params.cfg_scale, params.clean_estimate)?;
        let (l1, l2) = lambda_at(&params.lambdas, t as f64 / steps as f64);
        let g = sample_gumbel(base.rows(), base.cols(), rng);
        y = inject_noise(&base, record.residual(t), &g, l1, l2, params.strategy)?;
    }
    TokenSeq::new(y.argmax_rows_within(data_vocab.size()), data_vocab)
}

/// Plain ancestral sampling from `x_start` at step `t_start` down to `x_0`.
pub fn sample_multinomial(
    denoiser: &dyn Denoiser,
    sched: &DiffusionSchedule,
    cond: Condition,
    cfg_scale: f64,
    x_start: &TokenSeq,
    t_start: usize,
    rng: &mut RngStream,
) -> Result<TokenSeq> {
    let data_vocab = check_schedule(sched, denoiser)?;
    let vocab = state_vocab(sched)?;
    if t_start == 0 || t_start > sched.steps() {
        return Err(DiceError::StepOutOfRange {
            step: t_start,
            max: sched.steps(),
        });
    }
    let mut x = x_start.with_vocab(vocab)?;
    for t in (1..=t_start).rev() {
        let pi = reverse_logits(sched, denoiser, &x, cond, t, cfg_scale, CleanEstimate::Distribution)?;
        let g = sample_gumbel(pi.rows(), pi.cols(), rng);
        let perturbed = pi.perturbed(&g)?;
        x = if t == 1 {
            TokenSeq::new(perturbed.argmax_rows_within(data_vocab.size()), data_vocab)?
        } else {
            TokenSeq::new(perturbed.argmax_rows(), vocab)?
        };
    }
    Ok(x)
}

/// Draws `x_T` from the `T`-step marginal of a uniform clean token.
pub fn sample_prior_state(sched: &DiffusionSchedule, len: usize, rng: &mut RngStream) -> Result<TokenSeq> {
    let k = sched.num_classes();
    let t = sched.steps();
    let mask_p = sched.gamma_bar(t)?;
    let tokens = (0..len)
        .map(|_| {
            if rng.random::<f64>() < mask_p {
                k
            } else {
                rng.random_range(0..k)
            }
        })
        .collect();
    TokenSeq::new(tokens, state_vocab(sched)?)
}
