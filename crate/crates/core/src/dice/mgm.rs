use serde::{Deserialize, Serialize};

use super::{inject_noise, EditParams, Family, InversionRecord};
use crate::denoise::{guided_logits, Condition, Denoiser};
use crate::error::{DiceError, Result};
use crate::maskgen::{generate_mask_plan, renoise, run_renoise_chain, MaskPlan, NoiseMode};
use crate::rng::RngStream;
use crate::schedules::{lambda_at, MaskSchedule};
use crate::tokens::{sample_gumbel, TokenSeq};

/// How to draw the mask plan for a masked-model inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MgmPlanParams {
    pub schedule: MaskSchedule,
    pub noise: NoiseMode,
    pub steps: usize,
}

/// Draws a mask plan from `rng` and inverts `x0` along it.
pub fn invert_mgm(
    x0: &TokenSeq,
    denoiser: &dyn Denoiser,
    cond: Condition,
    params: &MgmPlanParams,
    rng: &mut RngStream,
) -> Result<InversionRecord> {
    let seed = rng.provenance();
    let plan = generate_mask_plan(
        params.schedule,
        params.noise,
        denoiser.data_vocab(),
        x0.len(),
        params.steps,
        rng,
    )?;
    let mut rec = invert_mgm_with_plan(x0, denoiser, cond, plan)?;
    rec.seeds.push(seed);
    Ok(rec)
}

/// `y_0 = D(x_0, c, 0)`, then `z_t = y_0 - D(x_t, c, t)` with
/// `x_t = x_0 (1 - m_t) + n m_t`.
pub fn invert_mgm_with_plan(
    x0: &TokenSeq,
    denoiser: &dyn Denoiser,
    cond: Condition,
    plan: MaskPlan,
) -> Result<InversionRecord> {
    let data_vocab = denoiser.data_vocab();
    if let Some(pos) = x0.tokens().iter().position(|&v| v >= data_vocab.size()) {
        return Err(DiceError::MaskInCleanData(pos));
    }
    if x0.len() != plan.len() {
        return Err(DiceError::ShapeMismatch {
            expected: (plan.len(), data_vocab.size()),
            actual: (x0.len(), data_vocab.size()),
        });
    }
    let clean_state = x0.with_vocab(plan.state_vocab())?;
    let y0 = denoiser.evaluate(&clean_state, cond, 0)?;
    let steps = plan.steps();
    let mut residuals = Vec::with_capacity(steps);
    let mut trajectory = Vec::with_capacity(steps);
    for t in 1..=steps {
        let x_t = renoise(&clean_state, &plan, t)?;
        let pred = denoiser.evaluate(&x_t, cond, t)?;
        residuals.push(y0.sub(&pred)?);
        trajectory.push(x_t);
    }
    let fingerprint = plan.fingerprint();
    InversionRecord::new(
        Family::Mgm,
        cond,
        data_vocab,
        residuals,
        trajectory,
        Some(y0),
        Some(plan),
        Vec::new(),
        fingerprint,
    )
}

/// Replays the sampler from `x_s`, `s = ceil(tau T)`, under the target
/// condition with `y = D(x_t, c') + inject(lambda_1 z_t, lambda_2 g)`.
pub fn edit_mgm(
    record: &InversionRecord,
    denoiser: &dyn Denoiser,
    params: &EditParams,
    rng: &mut RngStream,
) -> Result<TokenSeq> {
    record.expect_family(Family::Mgm)?;
    params.validate()?;
    let plan = record
        .plan()
        .ok_or_else(|| DiceError::MalformedRecord("masked-model record without a mask plan".into()))?;
    let data_vocab = record.data_vocab();
    if denoiser.data_vocab() != data_vocab {
        return Err(DiceError::InvalidVocab(format!(
            "record has {} tokens, denoiser {}",
            data_vocab.size(),
            denoiser.data_vocab().size()
        )));
    }
    let steps = record.steps();
    let start_t = params.start_step(steps);
    let start = record.state(start_t).clone();
    run_renoise_chain(plan, start, start_t, data_vocab, |t, x_t| {
        let base = guided_logits(denoiser, x_t, params.target, t, params.cfg_scale)?;
        let (l1, l2) = lambda_at(&params.lambdas, t as f64 / steps as f64);
        let g = sample_gumbel(base.rows(), base.cols(), rng);
        let y = inject_noise(&base, record.residual(t), &g, l1, l2, params.strategy)?;
        TokenSeq::new(y.argmax_rows(), data_vocab)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{CorruptionModel, TemplateDenoiser, TemplateMixture};
    use crate::dice::Strategy;
    use crate::schedules::LambdaSchedule;
    use crate::tokens::Vocab;
    use std::collections::BTreeMap;

    fn denoiser() -> TemplateDenoiser {
        let mut comps = BTreeMap::new();
        comps.insert(0, vec![(vec![0, 1, 2, 3], 0.5), (vec![0, 2, 2, 1], 0.5)]);
        comps.insert(1, vec![(vec![3, 3, 1, 0], 0.6), (vec![2, 3, 1, 0], 0.4)]);
        let mix = TemplateMixture::new(Vocab::new(4, false).unwrap(), comps).unwrap();
        TemplateDenoiser::new(mix, CorruptionModel::MaskToken)
    }

    fn params() -> MgmPlanParams {
        MgmPlanParams {
            schedule: MaskSchedule::default(),
            noise: NoiseMode::MaskToken,
            steps: 4,
        }
    }

    #[test]
    fn reconstruction_returns_source() {
        let den = denoiser();
        let x0 = TokenSeq::new(vec![0, 2, 2, 1], den.data_vocab()).unwrap();
        for seed in 0..20 {
            let rec = invert_mgm(&x0, &den, Condition::Label(0), &params(), &mut RngStream::new(seed, 1)).unwrap();
            assert_eq!(rec.steps(), 4);
            let out = edit_mgm(
                &rec,
                &den,
                &EditParams::reconstruction(Condition::Label(0)),
                &mut RngStream::new(seed, 2),
            )
            .unwrap();
            assert_eq!(out.tokens(), x0.tokens());
        }
    }

    #[test]
    fn fully_masked_state_matches_noise() {
        let den = denoiser();
        let x0 = TokenSeq::new(vec![3, 3, 1, 0], den.data_vocab()).unwrap();
        let rec = invert_mgm(&x0, &den, Condition::Label(1), &params(), &mut RngStream::new(3, 1)).unwrap();
        assert!(rec.state(4).tokens().iter().all(|&t| t == 4));
        assert_eq!(rec.clean_logits().unwrap().argmax_rows(), x0.tokens());
    }

    #[test]
    fn edit_under_other_label_lands_in_its_support() {
        let den = denoiser();
        let x0 = TokenSeq::new(vec![0, 1, 2, 3], den.data_vocab()).unwrap();
        let rec = invert_mgm(&x0, &den, Condition::Label(0), &params(), &mut RngStream::new(7, 1)).unwrap();
        let p = EditParams {
            lambdas: LambdaSchedule::constant(0.0, 1.0),
            strategy: Strategy::Linear,
            target: Condition::Label(1),
            ..EditParams::reconstruction(Condition::Label(0))
        };
        let out = edit_mgm(&rec, &den, &p, &mut RngStream::new(7, 2)).unwrap();
        assert!(out.tokens() == [3, 3, 1, 0] || out.tokens() == [2, 3, 1, 0]);
    }

    #[test]
    fn rejects_mask_in_source() {
        let den = denoiser();
        let x0 = TokenSeq::new(vec![0, 4, 2, 3], Vocab::new(4, true).unwrap()).unwrap();
        assert!(invert_mgm(&x0, &den, Condition::Label(0), &params(), &mut RngStream::new(1, 1)).is_err());
    }
}
