use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::denoise::{Condition, DataModel, Denoiser};
use crate::error::{DiceError, Result};
use crate::multinomial::{inference_posterior, q_sample, state_vocab};
use crate::rng::RngStream;
use crate::schedules::DiffusionSchedule;
use crate::tokens::{log_onehot, sample_gumbel, LogitField, LOG_FLOOR};

/// Largest clean state space `K^D` the histogram probe accepts.
pub const MAX_PROBE_STATES: usize = 10_000;

/// Joint cells with fewer hits than this are reported as undersampled.
const MIN_CELL_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluginEstimate {
    pub nats: f64,
    pub samples: usize,
    /// Occupied joint cells.
    pub cells: usize,
    pub undersampled_cells: usize,
}

/// Plug-in mutual information of paired discrete observations from their
/// joint histogram.
pub fn plugin_mutual_information<A, B>(pairs: &[(A, B)]) -> PluginEstimate
where
    A: Hash + Eq + Clone,
    B: Hash + Eq + Clone,
{
    let mut joint: HashMap<(A, B), usize> = HashMap::new();
    let mut left: HashMap<A, usize> = HashMap::new();
    let mut right: HashMap<B, usize> = HashMap::new();
    for (a, b) in pairs {
        *joint.entry((a.clone(), b.clone())).or_default() += 1;
        *left.entry(a.clone()).or_default() += 1;
        *right.entry(b.clone()).or_default() += 1;
    }
    let n = pairs.len() as f64;
    let nats = joint
        .iter()
        .map(|((a, b), &c)| {
            let c = c as f64;
            c / n * (c * n / (left[a] as f64 * right[b] as f64)).ln()
        })
        .sum::<f64>()
        .max(0.0);
    PluginEstimate {
        nats,
        samples: pairs.len(),
        cells: joint.len(),
        undersampled_cells: joint.values().filter(|&&c| c < MIN_CELL_COUNT).count(),
    }
}

/// Draws `(x_0, s(z_t))` pairs on a small multinomial fixture, where `s(z_t)`
/// is the state the residual steers the reverse step to,
/// `argmax(log pi(x_t) + z_t)`.
pub fn discrete_latent_pairs(
    model: &dyn DataModel,
    denoiser: &dyn Denoiser,
    label: u32,
    sched: &DiffusionSchedule,
    t: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let k = model.vocab().size();
    let len = model.seq_len();
    let states = (0..len).try_fold(1usize, |acc, _| acc.checked_mul(k).filter(|&s| s <= MAX_PROBE_STATES));
    if states.is_none() {
        return Err(DiceError::InvalidParams(format!(
            "{k}^{len} clean states exceed the probe limit of {MAX_PROBE_STATES}"
        )));
    }
    if t == 0 || t > sched.steps() {
        return Err(DiceError::StepOutOfRange {
            step: t,
            max: sched.steps(),
        });
    }
    let vocab = state_vocab(sched)?;
    let cond = Condition::Label(label);
    let mut cache: HashMap<Vec<usize>, LogitField> = HashMap::new();
    let mut pairs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x0 = model.sample(label, rng)?;
        let g_prev = sample_gumbel(len, vocab.alphabet(), rng);
        let g_t = sample_gumbel(len, vocab.alphabet(), rng);
        let prev = q_sample(sched, t - 1, &x0, &g_prev)?;
        let x_t = q_sample(sched, t, &x0, &g_t)?;
        let pi = match cache.get(x_t.tokens()) {
            Some(pi) => pi.clone(),
            None => {
                let pi = inference_posterior(sched, t, &x_t, &denoiser.evaluate(&x_t, cond, t)?)?;
                cache.insert(x_t.tokens().to_vec(), pi.clone());
                pi
            }
        };
        let z = log_onehot(&prev, LOG_FLOOR)?.sub(&pi)?;
        let steered = pi.zip_with(&z, |a, b| a + b)?.argmax_rows();
        pairs.push((x0.into_tokens(), steered));
    }
    Ok(pairs)
}

/// Plug-in estimate of `I(x_0; s(z_t))` over pairs from
/// [`discrete_latent_pairs`].
pub fn discrete_latent_mi_probe(
    model: &dyn DataModel,
    denoiser: &dyn Denoiser,
    label: u32,
    sched: &DiffusionSchedule,
    t: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<PluginEstimate> {
    let pairs = discrete_latent_pairs(model, denoiser, label, sched, t, samples, rng)?;
    Ok(plugin_mutual_information(&pairs))
}
