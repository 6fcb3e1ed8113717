//! Browser bindings: the mutual-information curve, sentiment edits on the
//! template fixture and a Gumbel-max histogram.
//!
//! Each export wraps a plain function so the logic can be tested natively.

use dice_core::analysis::{compute_edit_metrics, mi_curve as curve};
use dice_core::denoise::{Condition, CorruptionModel, Fixture};
use dice_core::dice::{edit_mgm, invert_mgm, CleanEstimate, EditParams, MgmPlanParams, Strategy};
use dice_core::maskgen::NoiseMode;
use dice_core::rng::{purpose, trial_stream};
use dice_core::schedules::{make_ddpm_schedule, LambdaSchedule, MaskCurve, MaskMode, MaskSchedule};
use dice_core::tokens::{gumbel_argmax, sample_gumbel, LogitField, Vocab};
use dice_core::{DiceError, RngStream};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const SENTIMENT: &str = include_str!("../../cli/fixtures/sentiment_templates.json");
const STEPS: usize = 12;
const SHOWN: usize = 6;

fn js(err: DiceError) -> JsError {
    JsError::new(&err.to_string())
}

/// Closed-form nats for `t = 1..=steps` on the linear DDPM schedule.
pub fn mi_values(steps: usize, dim: usize) -> dice_core::Result<Vec<f64>> {
    let sched = make_ddpm_schedule(steps)?;
    Ok(curve(&sched, dim, None)?.points.iter().map(|p| p.nats).collect())
}

#[wasm_bindgen]
pub fn mi_curve(steps: usize, dim: usize) -> Result<Vec<f64>, JsError> {
    mi_values(steps, dim).map_err(js)
}

#[derive(Debug, Serialize)]
pub struct EditSample {
    pub text: String,
    /// Per position, whether the edit changed the source token.
    pub changed: Vec<bool>,
    pub success: bool,
}

#[derive(Debug, Serialize)]
pub struct EditDemo {
    pub source: String,
    pub samples: Vec<EditSample>,
    pub hamming_similarity: f64,
    pub edit_success: f64,
}

/// Inverts `trials` negative reviews and edits each towards positive.
pub fn run_edit_demo(seed: u64, lambda1: f64, lambda2: f64, tau: f64, trials: usize) -> dice_core::Result<EditDemo> {
    let fixture = Fixture::from_json(SENTIMENT)?;
    let schedule = MaskSchedule::new(MaskCurve::Linear, MaskMode::Inclusive);
    let den = fixture.denoiser(CorruptionModel::RandomToken { schedule, steps: STEPS });
    let plan = MgmPlanParams {
        schedule,
        noise: NoiseMode::RandomToken,
        steps: STEPS,
    };
    let params = EditParams {
        tau,
        lambdas: LambdaSchedule::constant(lambda1, lambda2),
        strategy: Strategy::Linear,
        target: Condition::Label(1),
        cfg_scale: 1.0,
        clean_estimate: CleanEstimate::Distribution,
    };
    params.validate()?;
    let stream = |trial: usize, p: u8| RngStream::new(seed, trial_stream(trial as u64, p));
    // One source shared by every trial so the samples read as alternatives.
    let x0 = fixture.sample(0, &mut stream(0, purpose::SOURCE))?;
    let (mut hamming, mut success) = (0.0, 0);
    let mut samples = Vec::new();
    for trial in 0..trials.max(1) {
        let rec = invert_mgm(&x0, den.as_ref(), Condition::Label(0), &plan, &mut stream(trial, purpose::PLAN))?;
        let out = edit_mgm(&rec, den.as_ref(), &params, &mut stream(trial, purpose::EDIT))?;
        let m = compute_edit_metrics(&x0, &out, fixture.data_model(), 0, 1)?;
        hamming += m.hamming_similarity;
        success += usize::from(m.edit_success);
        if samples.len() < SHOWN {
            samples.push(EditSample {
                text: fixture.render(&out),
                changed: x0.tokens().iter().zip(out.tokens()).map(|(a, b)| a != b).collect(),
                success: m.edit_success,
            });
        }
    }
    let n = trials.max(1) as f64;
    Ok(EditDemo {
        source: fixture.render(&x0),
        samples,
        hamming_similarity: hamming / n,
        edit_success: success as f64 / n,
    })
}

/// JSON-encoded [`EditDemo`].
#[wasm_bindgen]
pub fn edit_demo(seed: u64, lambda1: f64, lambda2: f64, tau: f64, trials: usize) -> Result<String, JsError> {
    let demo = run_edit_demo(seed, lambda1, lambda2, tau, trials).map_err(js)?;
    serde_json::to_string(&demo).map_err(|e| JsError::new(&e.to_string()))
}

/// Frequencies of `argmax(log p + g)` over `draws` Gumbel draws.
pub fn gumbel_frequencies(weights: &[f64], draws: usize, seed: u64) -> dice_core::Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if weights.len() < 2 || weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
        return Err(DiceError::InvalidParams("need at least two nonnegative weights".into()));
    }
    let k = weights.len();
    let row: Vec<f64> = weights.iter().map(|w| (w / total).ln()).collect();
    let field = LogitField::from_rows(&vec![row; draws.max(1)])?;
    let g = sample_gumbel(draws.max(1), k, &mut RngStream::new(seed, trial_stream(0, purpose::ANALYSIS)));
    let mut counts = vec![0.0; k];
    for &tok in gumbel_argmax(&field, &g, Vocab::new(k, false)?)?.tokens() {
        counts[tok] += 1.0;
    }
    Ok(counts.iter().map(|c| c / draws.max(1) as f64).collect())
}

#[wasm_bindgen]
pub fn gumbel_histogram(weights: Vec<f64>, draws: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    gumbel_frequencies(&weights, draws, seed).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mi_values_decrease() {
        let v = mi_values(100, 1).unwrap();
        assert_eq!(v.len(), 100);
        assert!(v[1] > v[99] && v.iter().all(|x| *x >= 0.0));
        assert!(mi_values(1, 1).is_err());
    }

    #[test]
    fn residual_keeps_more_of_the_source() {
        let kept = run_edit_demo(4, 0.7, 0.3, 0.9, 100).unwrap();
        let fresh = run_edit_demo(4, 0.0, 1.0, 0.9, 100).unwrap();
        assert!(kept.hamming_similarity > fresh.hamming_similarity);
        assert!(kept.edit_success > 0.5);
        assert_eq!(kept.samples.len(), SHOWN);
        assert!(run_edit_demo(4, 0.7, 0.3, 1.5, 10).is_err());
    }

    #[test]
    fn demo_is_deterministic_per_seed() {
        let json = |seed| serde_json::to_string(&run_edit_demo(seed, 0.7, 0.3, 0.9, 30).unwrap()).unwrap();
        assert_eq!(json(2), json(2));
        assert_ne!(json(2), json(3));
    }

    #[test]
    fn gumbel_frequencies_track_weights() {
        let f = gumbel_frequencies(&[3.0, 1.0], 100_000, 1).unwrap();
        assert!((f[0] - 0.75).abs() < 0.01);
        assert!(gumbel_frequencies(&[1.0], 10, 1).is_err());
        assert!(gumbel_frequencies(&[1.0, f64::NAN], 10, 1).is_err());
    }
}
