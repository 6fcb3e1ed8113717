use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::rng::RngStream;
use crate::schedules::GaussianDdpmSchedule;

/// Mutual information in nats between `x_0 ~ N(0, I)` and the Gaussian
/// residual at step `t`, over `D` independent dimensions.
pub fn mi_closed_form(sched: &GaussianDdpmSchedule, dim: usize, t: usize) -> Result<f64> {
    let (alpha, beta) = (sched.alpha(t)?, sched.beta(t)?);
    let (ab_prev, ab) = (sched.alpha_bar(t - 1)?, sched.alpha_bar(t)?);
    let denom = (1.0 - ab_prev) + alpha * (1.0 - ab);
    if denom <= 0.0 {
        return Err(DiceError::Degenerate(format!("zero residual variance at t={t}")));
    }
    Ok(0.5 * dim as f64 * (beta * beta * ab_prev / denom).ln_1p())
}

/// Monte Carlo estimate for one dimension from the empirical correlation of
/// `x_0` and `z = x'_{t-1} - sqrt(alpha_t) x_t`, using `-0.5 ln(1 - rho^2)`.
pub fn mi_monte_carlo(sched: &GaussianDdpmSchedule, t: usize, samples: usize, rng: &mut RngStream) -> Result<f64> {
    if samples < 2 {
        return Err(DiceError::InvalidParams("need at least two samples".into()));
    }
    let (alpha, ab_prev, ab) = (sched.alpha(t)?, sched.alpha_bar(t - 1)?, sched.alpha_bar(t)?);
    let n = samples as f64;
    let (mut sx, mut sz, mut sxx, mut szz, mut sxz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..samples {
        let x0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        let e2: f64 = StandardNormal.sample(rng);
        let prev = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e1;
        let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e2;
        let z = prev - alpha.sqrt() * xt;
        sx += x0;
        sz += z;
        sxx += x0 * x0;
        szz += z * z;
        sxz += x0 * z;
    }
    let vx = sxx / n - (sx / n).powi(2);
    let vz = szz / n - (sz / n).powi(2);
    let cov = sxz / n - (sx / n) * (sz / n);
    if vx <= 0.0 || vz <= 0.0 {
        return Err(DiceError::Degenerate(format!("zero sample variance at t={t}")));
    }
    let rho2 = cov * cov / (vx * vz);
    if rho2 >= 1.0 {
        return Err(DiceError::Degenerate(format!("perfect sample correlation at t={t}")));
    }
    Ok(-0.5 * (-rho2).ln_1p())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiPoint {
    pub t: usize,
    pub nats: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiCurve {
    pub dim: usize,
    pub steps: usize,
    pub schedule_fingerprint: u64,
    pub points: Vec<MiPoint>,
}

impl MiCurve {
    /// A `# ...` provenance line, the column header, then
    /// `t,mi_nats[,mi_mc_nats]` rows. Missing Monte Carlo cells are empty.
    pub fn to_csv(&self, provenance: &str) -> String {
        let with_mc = self.points.iter().any(|p| p.monte_carlo.is_some());
        let mut out = format!(
            "# {provenance} dim={} steps={} schedule={:016x}\n",
            self.dim, self.steps, self.schedule_fingerprint
        );
        out.push_str(if with_mc { "t,mi_nats,mi_mc_nats\n" } else { "t,mi_nats\n" });
        for p in &self.points {
            match (with_mc, p.monte_carlo) {
                (true, Some(mc)) => out.push_str(&format!("{},{},{}\n", p.t, p.nats, mc)),
                (true, None) => out.push_str(&format!("{},{},\n", p.t, p.nats)),
                _ => out.push_str(&format!("{},{}\n", p.t, p.nats)),
            }
        }
        out
    }
}

/// Closed-form curve for `t = 1..=T`, optionally with Monte Carlo estimates
/// scaled to `D` dimensions.
pub fn mi_curve(
    sched: &GaussianDdpmSchedule,
    dim: usize,
    monte_carlo: Option<(usize, &mut RngStream)>,
) -> Result<MiCurve> {
    let steps = sched.steps();
    let mut mc = monte_carlo;
    let points = (1..=steps)
        .map(|t| {
            let nats = mi_closed_form(sched, dim, t)?;
            let monte_carlo = match mc.as_mut() {
                Some((n, rng)) => Some(dim as f64 * mi_monte_carlo(sched, t, *n, rng)?),
                None => None,
            };
            Ok(MiPoint { t, nats, monte_carlo })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MiCurve {
        dim,
        steps,
        schedule_fingerprint: sched.fingerprint(),
        points,
    })
}
