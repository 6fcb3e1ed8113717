//! Mutual-information curves, the discrete latent probe and edit metrics.

use std::collections::BTreeMap;

use dice_core::analysis::{
    compute_edit_metrics, discrete_latent_mi_probe, discrete_latent_pairs, expected_overlap, mi_closed_form,
    mi_curve, mi_monte_carlo, plugin_mutual_information,
};
use dice_core::denoise::{
    CorruptionModel, DataModel, MarkovChain, MarkovDenoiser, MarkovSource, TemplateMixture,
};
use dice_core::schedules::{make_ddpm_schedule, make_vq_schedule, GaussianDdpmSchedule, VqPreset};
use dice_core::tokens::{TokenSeq, Vocab};
use dice_core::RngStream;
use rand::seq::SliceRandom;

/// `-(D/2) ln(1 - rho^2)` with `rho` the correlation of `x_0` and the
/// residual, from `Cov(z, x_0) = beta_t sqrt(alpha_bar_{t-1})`.
fn correlation_oracle(s: &GaussianDdpmSchedule, dim: usize, t: usize) -> f64 {
    let beta = s.betas()[t - 1];
    let alpha = 1.0 - beta;
    let ab_prev: f64 = s.betas()[..t - 1].iter().map(|b| 1.0 - b).product();
    let ab = ab_prev * alpha;
    let cov2 = beta * beta * ab_prev;
    let var_z = cov2 + (1.0 - ab_prev) + alpha * (1.0 - ab);
    -(dim as f64) / 2.0 * (1.0 - cov2 / var_z).ln()
}

#[test]
fn closed_form_matches_correlation_oracle() {
    let s = make_ddpm_schedule(1000).unwrap();
    for dim in [1, 3] {
        for t in 1..=1000 {
            let got = mi_closed_form(&s, dim, t).unwrap();
            let expect = correlation_oracle(&s, dim, t);
            assert!(got >= 0.0);
            assert!((got - expect).abs() < 1e-12, "t={t}: {got} vs {expect}");
        }
    }
    let coarse = GaussianDdpmSchedule::from_betas(vec![0.3, 0.5, 0.2, 0.9]).unwrap();
    for t in 1..=4 {
        assert!((mi_closed_form(&coarse, 2, t).unwrap() - correlation_oracle(&coarse, 2, t)).abs() < 1e-12);
    }
}

#[test]
fn closed_form_vanishes_with_beta() {
    let s = GaussianDdpmSchedule::from_betas(vec![0.2, 1e-12, 0.3]).unwrap();
    assert!(mi_closed_form(&s, 1, 2).unwrap() < 1e-20);
    assert!(mi_closed_form(&s, 1, 3).unwrap() > 1e-3);
    assert!(mi_closed_form(&s, 1, 0).is_err());
    assert!(mi_closed_form(&s, 1, 4).is_err());
}

#[test]
fn curve_decreases_over_time() {
    let s = make_ddpm_schedule(1000).unwrap();
    let curve = mi_curve(&s, 1, None).unwrap();
    let at = |t: usize| curve.points[t - 1].nats;
    assert!(at(1000) < at(2));
    assert!(at(2) > at(10) && at(10) > at(100) && at(100) > at(500) && at(500) > at(1000));
}

#[test]
fn monte_carlo_agrees_with_closed_form() {
    let s = make_ddpm_schedule(1000).unwrap();
    let mut rng = RngStream::new(51, 0);
    for t in [2, 500, 1000] {
        let mc = mi_monte_carlo(&s, t, 1_000_000, &mut rng).unwrap();
        let exact = mi_closed_form(&s, 1, t).unwrap();
        assert!((mc - exact).abs() < 0.02, "t={t}: {mc} vs {exact}");
    }
    let coarse = GaussianDdpmSchedule::from_betas(vec![0.3, 0.5, 0.2, 0.9]).unwrap();
    for t in 1..=4 {
        let mc = mi_monte_carlo(&coarse, t, 1_000_000, &mut rng).unwrap();
        let exact = mi_closed_form(&coarse, 1, t).unwrap();
        assert!((mc - exact).abs() < 0.02, "coarse t={t}: {mc} vs {exact}");
    }
}

#[test]
fn monte_carlo_error_shrinks_with_samples() {
    let s = GaussianDdpmSchedule::from_betas(vec![0.3, 0.5, 0.2, 0.9]).unwrap();
    let exact = mi_closed_form(&s, 1, 2).unwrap();
    let mut rng = RngStream::new(52, 0);
    let mut errors = Vec::new();
    let mut spreads = Vec::new();
    for n in [10_000, 100_000, 1_000_000] {
        let reps: Vec<f64> = (0..20).map(|_| mi_monte_carlo(&s, 2, n, &mut rng).unwrap()).collect();
        let mean = reps.iter().sum::<f64>() / 20.0;
        errors.push(reps.iter().map(|r| (r - exact).abs()).sum::<f64>() / 20.0);
        spreads.push((reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 19.0).sqrt());
    }
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    assert!(spreads[0] > spreads[1] && spreads[1] > spreads[2], "{spreads:?}");
}

#[test]
fn monte_carlo_curve_overlay() {
    let s = GaussianDdpmSchedule::from_betas(vec![0.3, 0.5, 0.2]).unwrap();
    let mut rng = RngStream::new(53, 0);
    let curve = mi_curve(&s, 4, Some((200_000, &mut rng))).unwrap();
    for p in &curve.points {
        assert!((p.monte_carlo.unwrap() - p.nats).abs() < 0.02 * 4.0);
    }
    assert!(curve.to_csv("test").lines().any(|l| l.ends_with("mi_mc_nats")));
}

fn probe_source() -> MarkovSource {
    let mut chains = BTreeMap::new();
    chains.insert(
        0,
        MarkovChain {
            initial: vec![0.5, 0.3, 0.2],
            transition: vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.25, 0.25, 0.5]],
        },
    );
    MarkovSource::new(Vocab::new(3, false).unwrap(), 2, chains).unwrap()
}

fn entropy(src: &MarkovSource) -> f64 {
    let mut h = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let p = src.log_likelihood(&[a, b], 0).unwrap().exp();
            h -= p * p.ln();
        }
    }
    h
}

#[test]
fn probe_information_decays_with_t() {
    let src = probe_source();
    let sched = make_vq_schedule(10, 3, VqPreset::default()).unwrap();
    let den = MarkovDenoiser::new(src.clone(), CorruptionModel::Multinomial(sched.clone()));
    let mut wins = 0;
    for rep in 0..20 {
        let mut rng = RngStream::new(54, rep);
        let early = discrete_latent_mi_probe(&src, &den, 0, &sched, 2, 100_000, &mut rng).unwrap();
        let late = discrete_latent_mi_probe(&src, &den, 0, &sched, 10, 100_000, &mut rng).unwrap();
        wins += usize::from(early.nats > late.nats);
    }
    // One-sided sign test: P(at least 15 of 20 | p = 1/2) < 0.05.
    assert!(wins >= 15, "{wins} of 20");
}

#[test]
fn probe_on_shuffled_pairs_is_near_zero() {
    let src = probe_source();
    let sched = make_vq_schedule(10, 3, VqPreset::default()).unwrap();
    let den = MarkovDenoiser::new(src.clone(), CorruptionModel::Multinomial(sched.clone()));
    let mut rng = RngStream::new(55, 0);
    let pairs = discrete_latent_pairs(&src, &den, 0, &sched, 2, 100_000, &mut rng).unwrap();
    let (x0s, mut steered): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    steered.shuffle(&mut rng);
    let shuffled: Vec<_> = x0s.into_iter().zip(steered).collect();
    assert!(plugin_mutual_information(&shuffled).nats < 0.02);
}

#[test]
fn probe_at_first_step_recovers_source_entropy() {
    let src = probe_source();
    let sched = make_vq_schedule(10, 3, VqPreset::default()).unwrap();
    let den = MarkovDenoiser::new(src.clone(), CorruptionModel::Multinomial(sched.clone()));
    let mut rng = RngStream::new(56, 0);
    let est = discrete_latent_mi_probe(&src, &den, 0, &sched, 1, 100_000, &mut rng).unwrap();
    assert!((est.nats - entropy(&src)).abs() < 0.05, "{} vs {}", est.nats, entropy(&src));
    assert_eq!(est.undersampled_cells, 0);
}

#[test]
fn probe_rejects_large_state_spaces() {
    let src = MarkovSource::new(Vocab::new(10, false).unwrap(), 5, {
        let mut chains = BTreeMap::new();
        chains.insert(
            0,
            MarkovChain {
                initial: vec![0.1; 10],
                transition: vec![vec![0.1; 10]; 10],
            },
        );
        chains
    })
    .unwrap();
    let sched = make_vq_schedule(4, 10, VqPreset::default()).unwrap();
    let den = MarkovDenoiser::new(src.clone(), CorruptionModel::Multinomial(sched.clone()));
    assert!(discrete_latent_mi_probe(&src, &den, 0, &sched, 1, 10, &mut RngStream::new(0, 0)).is_err());
}

#[test]
fn independent_draws_match_expected_overlap() {
    let mut comps = BTreeMap::new();
    comps.insert(0, vec![(vec![0, 1, 2, 3], 0.5), (vec![0, 2, 2, 1], 0.5)]);
    comps.insert(1, vec![(vec![3, 3, 1, 0], 0.6), (vec![0, 3, 2, 0], 0.4)]);
    let mix = TemplateMixture::new(Vocab::new(4, false).unwrap(), comps).unwrap();
    let x0 = TokenSeq::new(vec![0, 1, 2, 3], mix.vocab()).unwrap();
    let mut rng = RngStream::new(57, 0);
    let n = 50_000;
    let mut total = 0.0;
    for _ in 0..n {
        let draw = mix.sample(1, &mut rng).unwrap();
        let m = compute_edit_metrics(&x0, &draw, &mix, 0, 1).unwrap();
        assert!(m.edit_success);
        total += m.hamming_similarity;
    }
    let expect = expected_overlap(&mix, &x0, 1).unwrap();
    assert!((total / n as f64 - expect).abs() < 0.01);
    let same = compute_edit_metrics(&x0, &x0, &mix, 0, 1).unwrap();
    assert_eq!((same.token_accuracy, same.hamming_similarity), (1.0, 1.0));
    assert!(!same.edit_success);
}
