//! Noise schedules: mask-and-replace coefficients, mask fractions, residual
//! weights over time, and the Gaussian DDPM schedule used by the mutual
//! information analysis.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DiceError, Result};

const COEFF_TOL: f64 = 1e-12;

/// Per-step mask-and-replace coefficients for `T` steps over `K` data tokens.
///
/// Step `t` keeps a token with probability `alpha_t`, sends it to the mask
/// state with probability `gamma_t`, and replaces it with each data token
/// (including itself) with probability `beta_t = (1 - alpha_t - gamma_t) / K`.
/// Cumulative arrays are indexed `0..=T` with the identity at `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    num_classes: usize,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    gamma_bar: Vec<f64>,
    beta_bar: Vec<f64>,
}

/// Named curves for [`make_vq_schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum VqPreset {
    /// Cumulative mask probability rises linearly to 1; no replacement.
    MaskOnly,
    /// Cumulative keep probability falls linearly to `keep_end` while the
    /// cumulative mask probability rises linearly to `mask_end`; the rest is
    /// uniform replacement.
    MaskAndReplace { keep_end: f64, mask_end: f64 },
}

impl Default for VqPreset {
    fn default() -> Self {
        VqPreset::MaskAndReplace {
            keep_end: 1e-5,
            mask_end: 0.9,
        }
    }
}

impl DiffusionSchedule {
    /// Builds a schedule from per-step keep and mask probabilities.
    pub fn from_steps(num_classes: usize, alpha: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(DiceError::InvalidSchedule(format!(
                "K must be at least 2, got {num_classes}"
            )));
        }
        if alpha.is_empty() || alpha.len() != gamma.len() {
            return Err(DiceError::InvalidSchedule(format!(
                "alpha ({}) and gamma ({}) must be non-empty and equally long",
                alpha.len(),
                gamma.len()
            )));
        }
        let k = num_classes as f64;
        let mut beta = Vec::with_capacity(alpha.len());
        for (i, (&a, &g)) in alpha.iter().zip(&gamma).enumerate() {
            let in_unit = |v: f64| (-COEFF_TOL..=1.0 + COEFF_TOL).contains(&v);
            if !in_unit(a) || !in_unit(g) || a + g > 1.0 + COEFF_TOL {
                return Err(DiceError::InvalidSchedule(format!(
                    "step {}: alpha={a}, gamma={g} violate alpha, gamma in [0,1], alpha+gamma <= 1",
                    i + 1
                )));
            }
            beta.push(((1.0 - a - g) / k).max(0.0));
        }

        let steps = alpha.len();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut gamma_bar = Vec::with_capacity(steps + 1);
        let mut beta_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        gamma_bar.push(0.0);
        beta_bar.push(0.0);
        let mut keep = 1.0;
        let mut unmasked = 1.0;
        for t in 0..steps {
            keep *= alpha[t];
            unmasked *= 1.0 - gamma[t];
            let gbar = 1.0 - unmasked;
            alpha_bar.push(keep);
            gamma_bar.push(gbar);
            // Mass left after keeping and masking is spread uniformly over the K data tokens.
            beta_bar.push(((1.0 - keep - gbar) / k).max(0.0));
        }

        Ok(Self {
            num_classes,
            alpha,
            gamma,
            beta,
            alpha_bar,
            gamma_bar,
            beta_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Index of the absorbing mask state in `K + 1`-wide categoricals.
    pub fn mask_id(&self) -> usize {
        self.num_classes
    }

    fn check_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(DiceError::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    fn check_cumulative(&self, t: usize) -> Result<usize> {
        if t > self.steps() {
            return Err(DiceError::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(t)
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check_step(t)?])
    }

    pub fn gamma(&self, t: usize) -> Result<f64> {
        Ok(self.gamma[self.check_step(t)?])
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check_step(t)?])
    }

    /// Cumulative keep probability; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_cumulative(t)?])
    }

    pub fn gamma_bar(&self, t: usize) -> Result<f64> {
        Ok(self.gamma_bar[self.check_cumulative(t)?])
    }

    pub fn beta_bar(&self, t: usize) -> Result<f64> {
        Ok(self.beta_bar[self.check_cumulative(t)?])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn gamma_bars(&self) -> &[f64] {
        &self.gamma_bar
    }

    pub fn beta_bars(&self) -> &[f64] {
        &self.beta_bar
    }

    /// Stable 64-bit digest of `K` and the per-step coefficients.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"vq-schedule");
        h.update((self.num_classes as u64).to_le_bytes());
        for v in self.alpha.iter().chain(&self.gamma) {
            h.update(v.to_bits().to_le_bytes());
        }
        digest_u64(h)
    }
}

pub(crate) fn digest_u64(h: Sha256) -> u64 {
    let bytes = h.finalize();
    u64::from_le_bytes(bytes[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Builds a `T`-step schedule over `K` data tokens from a named preset.
///
/// Per-step coefficients are recovered from linear cumulative curves:
/// `alpha_t = abar_t / abar_{t-1}` and `gamma_t = 1 - (1 - gbar_t) / (1 - gbar_{t-1})`.
pub fn make_vq_schedule(steps: usize, num_classes: usize, preset: VqPreset) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(DiceError::InvalidSchedule("T must be at least 1".into()));
    }
    let (keep_end, mask_end) = match preset {
        VqPreset::MaskOnly => (0.0, 1.0),
        VqPreset::MaskAndReplace { keep_end, mask_end } => (keep_end, mask_end),
    };
    if !(0.0..=1.0).contains(&keep_end) || !(0.0..=1.0).contains(&mask_end) {
        return Err(DiceError::InvalidSchedule(format!(
            "keep_end={keep_end} and mask_end={mask_end} must lie in [0, 1]"
        )));
    }
    if keep_end > 0.01 {
        return Err(DiceError::InvalidSchedule(format!(
            "keep_end={keep_end} leaves more than 1% of the signal at t=T"
        )));
    }
    let abar = |t: usize| 1.0 - (t as f64 / steps as f64) * (1.0 - keep_end);
    let gbar = |t: usize| (t as f64 / steps as f64) * mask_end;

    let mut alpha = Vec::with_capacity(steps);
    let mut gamma = Vec::with_capacity(steps);
    for t in 1..=steps {
        let prev_keep = abar(t - 1);
        let a = if prev_keep > 0.0 { abar(t) / prev_keep } else { 0.0 };
        let prev_unmasked = 1.0 - gbar(t - 1);
        let g = if prev_unmasked > 0.0 {
            1.0 - (1.0 - gbar(t)) / prev_unmasked
        } else {
            1.0
        };
        if a + g > 1.0 + COEFF_TOL {
            return Err(DiceError::InvalidSchedule(format!(
                "preset infeasible at step {t}: alpha+gamma = {}",
                a + g
            )));
        }
        alpha.push(a);
        gamma.push(g.min(1.0 - a).max(0.0));
    }
    DiffusionSchedule::from_steps(num_classes, alpha, gamma)
}

/// Shape of the masked-fraction curve `r(t)` on normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskCurve {
    /// `r(t) = t`
    Linear,
    /// `r(t) = 1 - cos(t pi / 2)`
    OneMinusCos,
    /// `r(t) = cos((t - 1) pi / 2)`
    ShiftedCos,
    /// `r(t) = 1 - sqrt(1 - t)`
    OneMinusSqrtComplement,
    /// `r(t) = sqrt(t)`
    Sqrt,
}

impl MaskCurve {
    pub const ALL: [MaskCurve; 5] = [
        MaskCurve::Linear,
        MaskCurve::OneMinusCos,
        MaskCurve::ShiftedCos,
        MaskCurve::OneMinusSqrtComplement,
        MaskCurve::Sqrt,
    ];

    fn eval(self, t: f64) -> f64 {
        let r = match self {
            MaskCurve::Linear => t,
            MaskCurve::OneMinusCos => 1.0 - (t * FRAC_PI_2).cos(),
            MaskCurve::ShiftedCos => ((t - 1.0) * FRAC_PI_2).cos(),
            MaskCurve::OneMinusSqrtComplement => 1.0 - (1.0 - t).sqrt(),
            MaskCurve::Sqrt => t.sqrt(),
        };
        r.clamp(0.0, 1.0)
    }

    pub fn code(self) -> u8 {
        match self {
            MaskCurve::Linear => 0,
            MaskCurve::OneMinusCos => 1,
            MaskCurve::ShiftedCos => 2,
            MaskCurve::OneMinusSqrtComplement => 3,
            MaskCurve::Sqrt => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == code)
    }
}

/// Whether successive masks nest (`m_s` within `m_t` for `s <= t`) or are drawn
/// independently per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Inclusive,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub curve: MaskCurve,
    pub mode: MaskMode,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            curve: MaskCurve::Linear,
            mode: MaskMode::Inclusive,
        }
    }
}

impl MaskSchedule {
    pub fn new(curve: MaskCurve, mode: MaskMode) -> Self {
        Self { curve, mode }
    }

    pub fn fraction(&self, t_norm: f64) -> Result<f64> {
        mask_fraction(self, t_norm)
    }

    /// Digest of the curve, mode, sequence length and step count.
    pub fn fingerprint(&self, len: usize, steps: usize) -> u64 {
        let mut h = Sha256::new();
        h.update(b"mask-schedule");
        h.update([self.curve.code(), self.mode as u8]);
        h.update((len as u64).to_le_bytes());
        h.update((steps as u64).to_le_bytes());
        digest_u64(h)
    }
}

/// Fraction of positions masked at normalized time `t_norm`.
pub fn mask_fraction(schedule: &MaskSchedule, t_norm: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t_norm) {
        return Err(DiceError::TimeOutOfRange(t_norm));
    }
    Ok(schedule.curve.eval(t_norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaDecay {
    Constant,
    /// `lambda_1 (1 - t)`
    Linear,
    /// `lambda_1 (1 + cos(pi t)) / 2`
    Cosine,
}

/// Residual weight `lambda_1` and noise weight `lambda_2` as functions of
/// normalized time. Decay applies to `lambda_1` only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub decay: LambdaDecay,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LambdaSchedule {
    pub fn constant(lambda1: f64, lambda2: f64) -> Self {
        Self {
            decay: LambdaDecay::Constant,
            lambda1,
            lambda2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda2.is_finite())
            || self.lambda1 < 0.0
            || self.lambda2 < 0.0
        {
            return Err(DiceError::InvalidParams(format!(
                "lambda1={} and lambda2={} must be finite and nonnegative",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// `(lambda_1, lambda_2)` at normalized time `t_norm` (clamped to `[0, 1]`).
pub fn lambda_at(schedule: &LambdaSchedule, t_norm: f64) -> (f64, f64) {
    let t = t_norm.clamp(0.0, 1.0);
    let scale = match schedule.decay {
        LambdaDecay::Constant => 1.0,
        LambdaDecay::Linear => 1.0 - t,
        LambdaDecay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
    };
    (schedule.lambda1 * scale.max(0.0), schedule.lambda2)
}

/// Gaussian DDPM variance schedule. Arrays are indexed by step `t` with
/// `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDdpmSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DDPM_BETA_START: f64 = 1e-4;
pub const DDPM_BETA_END: f64 = 0.02;

pub fn make_ddpm_schedule(steps: usize) -> Result<GaussianDdpmSchedule> {
    if steps < 2 {
        return Err(DiceError::InvalidSchedule(format!(
            "DDPM schedule needs T >= 2, got {steps}"
        )));
    }
    let span = DDPM_BETA_END - DDPM_BETA_START;
    let beta: Vec<f64> = (0..steps)
        .map(|i| DDPM_BETA_START + span * i as f64 / (steps - 1) as f64)
        .collect();
    GaussianDdpmSchedule::from_betas(beta)
}

impl GaussianDdpmSchedule {
    /// Schedule from explicit per-step variances, each in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(DiceError::InvalidSchedule("empty DDPM schedule".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiceError::InvalidSchedule(format!("DDPM beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(DiceError::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.alpha[t - 1])
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(self.alpha_bar[t])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"ddpm-schedule");
        for b in &self.beta {
            h.update(b.to_bits().to_le_bytes());
        }
        digest_u64(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_absorbing_step() {
        let s = DiffusionSchedule::from_steps(4, vec![0.0], vec![1.0]).unwrap();
        assert_eq!(s.gamma_bar(1).unwrap(), 1.0);
        assert_eq!(s.alpha_bar(1).unwrap(), 0.0);
        assert_eq!(s.beta_bar(1).unwrap(), 0.0);
    }

    #[test]
    fn rejects_infeasible_steps() {
        assert!(DiffusionSchedule::from_steps(4, vec![0.7], vec![0.5]).is_err());
        assert!(DiffusionSchedule::from_steps(4, vec![0.5, 0.5], vec![0.1]).is_err());
        assert!(DiffusionSchedule::from_steps(1, vec![0.5], vec![0.1]).is_err());
        let bad = VqPreset::MaskAndReplace {
            keep_end: 0.001,
            mask_end: 1.5,
        };
        assert!(make_vq_schedule(10, 4, bad).is_err());
        assert!(make_vq_schedule(0, 4, VqPreset::MaskOnly).is_err());
    }

    #[test]
    fn presets_satisfy_invariants() {
        for preset in [VqPreset::MaskOnly, VqPreset::default()] {
            for steps in [1, 2, 16, 100] {
                let s = make_vq_schedule(steps, 8, preset).unwrap();
                assert!(s.alpha_bar(steps).unwrap() <= 0.01);
                for t in 1..=steps {
                    assert!(s.alpha(t).unwrap() + s.gamma(t).unwrap() <= 1.0 + 1e-12);
                    assert!(s.alpha_bar(t).unwrap() <= s.alpha_bar(t - 1).unwrap());
                    assert!(s.gamma_bar(t).unwrap() >= s.gamma_bar(t - 1).unwrap());
                    assert!(s.beta_bar(t).unwrap() >= 0.0);
                }
            }
        }
    }

    #[test]
    fn mask_only_has_no_replacement() {
        let s = make_vq_schedule(10, 5, VqPreset::MaskOnly).unwrap();
        for t in 1..=10 {
            assert!(s.beta(t).unwrap().abs() < 1e-15);
            assert!((s.gamma_bar(t).unwrap() - t as f64 / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cumulative_out_of_range() {
        let s = make_vq_schedule(4, 3, VqPreset::MaskOnly).unwrap();
        assert!(s.alpha(0).is_err());
        assert!(s.alpha(5).is_err());
        assert!(s.alpha_bar(0).is_ok());
        assert!(s.alpha_bar(5).is_err());
    }

    #[test]
    fn mask_fraction_examples() {
        let sqrt = MaskSchedule::new(MaskCurve::Sqrt, MaskMode::Inclusive);
        assert!((mask_fraction(&sqrt, 0.25).unwrap() - 0.5).abs() < 1e-15);
        let cos = MaskSchedule::new(MaskCurve::OneMinusCos, MaskMode::Inclusive);
        assert!((mask_fraction(&cos, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let lin = MaskSchedule::default();
        assert!((mask_fraction(&lin, 0.9).unwrap() - 0.9).abs() < 1e-15);
        assert!(mask_fraction(&lin, 1.5).is_err());
        assert!(mask_fraction(&lin, -0.1).is_err());
    }

    #[test]
    fn mask_curves_are_monotone_with_fixed_endpoints() {
        for curve in MaskCurve::ALL {
            let s = MaskSchedule::new(curve, MaskMode::Random);
            assert!(mask_fraction(&s, 0.0).unwrap().abs() < 1e-12, "{curve:?}");
            assert!((mask_fraction(&s, 1.0).unwrap() - 1.0).abs() < 1e-12, "{curve:?}");
            let mut prev = 0.0;
            for i in 0..=1000 {
                let r = mask_fraction(&s, i as f64 / 1000.0).unwrap();
                assert!(r + 1e-15 >= prev, "{curve:?} decreases at {i}");
                prev = r;
            }
            assert_eq!(MaskCurve::from_code(curve.code()), Some(curve));
        }
    }

    #[test]
    fn lambda_schedule_examples() {
        let c = LambdaSchedule::constant(0.7, 0.3);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(lambda_at(&c, t), (0.7, 0.3));
        }
        let lin = LambdaSchedule {
            decay: LambdaDecay::Linear,
            lambda1: 1.0,
            lambda2: 0.4,
        };
        assert_eq!(lambda_at(&lin, 1.0), (0.0, 0.4));
        assert_eq!(lambda_at(&lin, 0.0), (1.0, 0.4));
        let cos = LambdaSchedule {
            decay: LambdaDecay::Cosine,
            ..lin
        };
        let (l1, _) = lambda_at(&cos, 1.0);
        assert!(l1.abs() < 1e-15);
        assert_eq!(lambda_at(&LambdaSchedule::constant(1.0, 0.0), 0.5), (1.0, 0.0));
        assert!(LambdaSchedule::constant(-0.1, 0.0).validate().is_err());
    }

    #[test]
    fn ddpm_schedule_endpoints() {
        let s = make_ddpm_schedule(1000).unwrap();
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[999] - 0.02).abs() < 1e-17);
        let direct: f64 = s.betas().iter().map(|b| 1.0 - b).product();
        assert!((s.alpha_bar(1000).unwrap() - direct).abs() < 1e-15);
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(make_ddpm_schedule(1).is_err());
    }
}
