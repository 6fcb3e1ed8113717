//! Mask-and-replace multinomial diffusion kernels over `K + 1` states, the
//! last of which is the absorbing mask.
//!
//! All categoricals are returned as log-probabilities clamped at
//! [`LOG_FLOOR`].

use crate::error::{DiceError, Result};
use crate::schedules::DiffusionSchedule;
use crate::tokens::{floored_ln, gumbel_argmax, logsumexp, GumbelField, LogitField, TokenSeq, Vocab, LOG_FLOOR};

/// Dense column-stochastic `(K+1) x (K+1)` matrix; entry `(to, from)` is the
/// probability of moving from state `from` to state `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(size: usize) -> Self {
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            data[i * size + i] = 1.0;
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, to: usize, from: usize) -> f64 {
        self.data[to * self.size + from]
    }

    /// `self * rhs`, i.e. apply `rhs` first.
    pub fn matmul(&self, rhs: &TransitionMatrix) -> TransitionMatrix {
        let n = self.size;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += a * rhs.data[k * n + j];
                }
            }
        }
        TransitionMatrix { size: n, data }
    }

    /// Distribution reached from a one-hot start at `from`.
    pub fn column(&self, from: usize) -> Vec<f64> {
        (0..self.size).map(|to| self.get(to, from)).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.size)
            .map(|from| (0..self.size).map(|to| self.get(to, from)).sum())
            .collect()
    }
}

/// Probability `Q_t[to, from]` of one forward step.
pub fn step_prob(sched: &DiffusionSchedule, t: usize, to: usize, from: usize) -> Result<f64> {
    let (alpha, beta, gamma) = (sched.alpha(t)?, sched.beta(t)?, sched.gamma(t)?);
    Ok(kernel_entry(sched.mask_id(), alpha, beta, gamma, to, from))
}

/// Probability `Qbar_t[to, from]` of the `t`-step marginal; `t = 0` is the identity.
pub fn cumulative_prob(sched: &DiffusionSchedule, t: usize, to: usize, from: usize) -> Result<f64> {
    let (alpha, beta, gamma) = (sched.alpha_bar(t)?, sched.beta_bar(t)?, sched.gamma_bar(t)?);
    Ok(kernel_entry(sched.mask_id(), alpha, beta, gamma, to, from))
}

fn kernel_entry(mask: usize, alpha: f64, beta: f64, gamma: f64, to: usize, from: usize) -> f64 {
    if from == mask {
        return if to == mask { 1.0 } else { 0.0 };
    }
    if to == mask {
        gamma
    } else if to == from {
        alpha + beta
    } else {
        beta
    }
}

pub fn build_q(sched: &DiffusionSchedule, t: usize) -> Result<TransitionMatrix> {
    let n = sched.num_classes() + 1;
    let mut data = vec![0.0; n * n];
    for to in 0..n {
        for from in 0..n {
            data[to * n + from] = step_prob(sched, t, to, from)?;
        }
    }
    Ok(TransitionMatrix { size: n, data })
}

/// Closed-form marginal `q(x_t | x_0)` over the `K + 1` states.
pub fn qt_bar_apply(sched: &DiffusionSchedule, t: usize, x0: usize) -> Result<Vec<f64>> {
    if x0 >= sched.num_classes() {
        return Err(DiceError::MaskInCleanData(0));
    }
    (0..=sched.num_classes())
        .map(|to| cumulative_prob(sched, t, to, x0))
        .collect()
}

/// Draws `x_t ~ q(x_t | x_0)` per position as `argmax(log q + g)`. At `t = 0`
/// the input is returned unchanged (re-tagged with the mask vocabulary).
pub fn q_sample(sched: &DiffusionSchedule, t: usize, x0: &TokenSeq, g: &GumbelField) -> Result<TokenSeq> {
    let vocab = state_vocab(sched)?;
    if let Some(pos) = x0.tokens().iter().position(|&v| v >= sched.num_classes()) {
        return Err(DiceError::MaskInCleanData(pos));
    }
    if t == 0 {
        return x0.with_vocab(vocab);
    }
    let width = vocab.alphabet();
    let mut values = Vec::with_capacity(x0.len() * width);
    for &tok in x0.tokens() {
        values.extend(qt_bar_apply(sched, t, tok)?.into_iter().map(|p| floored_ln(p, LOG_FLOOR)));
    }
    let log_q = LogitField::new(x0.len(), width, values, LOG_FLOOR)?;
    gumbel_argmax(&log_q, g, vocab)
}

/// Vocabulary of diffusion states: `K` data tokens plus the mask.
pub fn state_vocab(sched: &DiffusionSchedule) -> Result<Vocab> {
    Vocab::new(sched.num_classes(), true)
}

/// Log posterior `log q(x_{t-1} | x_t, x_0)` over the `K + 1` predecessor
/// states, via `Q_t^T v(x_t) * Qbar_{t-1} v(x_0)` normalized in log space.
pub fn posterior_q(sched: &DiffusionSchedule, t: usize, x_t: usize, x0: usize) -> Result<Vec<f64>> {
    let n = sched.num_classes() + 1;
    if x0 + 1 >= n {
        return Err(DiceError::MaskInCleanData(0));
    }
    if x_t >= n {
        return Err(DiceError::TokenOutOfRange {
            position: 0,
            token: x_t,
            alphabet: n,
        });
    }
    if cumulative_prob(sched, t, x_t, x0)? <= 0.0 {
        return Err(DiceError::InconsistentPair { step: t, x_t, x0 });
    }
    let mut logp = Vec::with_capacity(n);
    for prev in 0..n {
        let forward = step_prob(sched, t, x_t, prev)?;
        let reach = cumulative_prob(sched, t - 1, prev, x0)?;
        logp.push(if forward > 0.0 && reach > 0.0 {
            forward.ln() + reach.ln()
        } else {
            f64::NEG_INFINITY
        });
    }
    let lse = logsumexp(&logp);
    Ok(logp.into_iter().map(|v| (v - lse).max(LOG_FLOOR)).collect())
}

/// Probability mass a denoiser row may put on unreachable clean tokens before
/// the pair is reported as inconsistent.
const UNREACHABLE_MASS_TOL: f64 = 1e-9;

/// Compound posterior `log p(x_{t-1} | x_t) = log sum_x0 q(x_{t-1} | x_t, x0) p(x0 | x_t)`.
///
/// `denoised` is `D x K` with rows normalized in probability space; the result
/// is `D x (K + 1)`. Clean tokens from which `x_t` is unreachable contribute
/// nothing; if they carry more than negligible mass the pair is inconsistent.
pub fn inference_posterior(
    sched: &DiffusionSchedule,
    t: usize,
    x_t: &TokenSeq,
    denoised: &LogitField,
) -> Result<LogitField> {
    let k = sched.num_classes();
    denoised.check_shape((x_t.len(), k))?;
    for (row, mass) in denoised.row_masses().into_iter().enumerate() {
        if (mass - 1.0).abs() > 1e-9 {
            return Err(DiceError::Unnormalized { row, mass });
        }
    }
    if t == 0 || t > sched.steps() {
        return Err(DiceError::StepOutOfRange {
            step: t,
            max: sched.steps(),
        });
    }

    // Posteriors depend only on (x_t, x0), so cache one table per observed state.
    let n = k + 1;
    let mut tables: Vec<Option<Vec<Option<Vec<f64>>>>> = vec![None; n];
    let mut values = Vec::with_capacity(x_t.len() * n);
    for (i, &obs) in x_t.tokens().iter().enumerate() {
        let table = tables[obs].get_or_insert_with(|| {
            (0..k).map(|x0| posterior_q(sched, t, obs, x0).ok()).collect()
        });
        let weights = denoised.row(i);
        let mut terms: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut lost = 0.0;
        for (x0, post) in table.iter().enumerate() {
            match post {
                Some(post) => terms.push(post.iter().map(|lp| lp + weights[x0]).collect()),
                None => lost += weights[x0].exp(),
            }
        }
        if lost > UNREACHABLE_MASS_TOL || terms.is_empty() {
            let x0 = crate::tokens::argmax(weights);
            return Err(DiceError::InconsistentPair { step: t, x_t: obs, x0 });
        }
        let mut row: Vec<f64> = (0..n)
            .map(|prev| {
                let col: Vec<f64> = terms.iter().map(|term| term[prev]).collect();
                logsumexp(&col)
            })
            .collect();
        let lse = logsumexp(&row);
        for v in row.iter_mut() {
            *v = (*v - lse).max(LOG_FLOOR);
        }
        values.extend(row);
    }
    LogitField::new(x_t.len(), n, values, LOG_FLOOR)
}
