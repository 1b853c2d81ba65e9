mod common;

use common::schedule;
use mdps_core::oracle::{
    analytic_posterior, oracle_check, oracle_sampler_config, AnalyticDenoiser, GaussianPrior, OracleScale,
    OracleSetup,
};

#[test]
fn analytic_noise_examples() {
    let sched = schedule();
    let d = AnalyticDenoiser::new(GaussianPrior::scalar(0.0, 1.0).unwrap(), &sched);
    assert!((d.eps(1.0, 0.5, 0) - 0.5f64.sqrt()).abs() < 1e-12);
    assert!((d.eps(1.0, 0.5, 0) - 0.7071).abs() < 1e-4);

    let d = AnalyticDenoiser::new(GaussianPrior::scalar(0.4, 0.3).unwrap(), &sched);
    assert!(d.eps(0.7f64.sqrt() * 0.4, 0.7, 0).abs() < 1e-12);
    assert_eq!(d.eps(3.0, 1.0, 0), 0.0);
}

#[test]
fn analytic_noise_is_the_scaled_score() {
    // eps* = -sqrt(1 - ab) d/dx log N(x; sqrt(ab) mu, ab var + 1 - ab)
    let sched = schedule();
    let (mu, var) = (0.3, 0.5);
    let d = AnalyticDenoiser::new(GaussianPrior::scalar(mu, var).unwrap(), &sched);
    for &(x, ab) in &[(0.2, 0.9), (-1.5, 0.3), (2.0, 0.01)] {
        let v: f64 = ab * var + 1.0 - ab;
        let log_p = |x: f64| -(x - ab.sqrt() * mu).powi(2) / (2.0 * v);
        let h = 1e-5;
        let score = (log_p(x + h) - log_p(x - h)) / (2.0 * h);
        let expected = -(1.0 - ab).sqrt() * score;
        assert!((d.eps(x, ab, 0) - expected).abs() < 1e-6);
    }
}

#[test]
fn conjugate_posterior_examples() {
    let (m, v) = analytic_posterior(0.0, 1.0, 1.0, 0.25).unwrap();
    assert!((m - 0.8).abs() < 1e-12);
    assert!((v - 0.2).abs() < 1e-12);
    let (m, _) = analytic_posterior(0.2, 0.7, 1.4, 0.7).unwrap();
    assert!((m - 0.8).abs() < 1e-12);
    let (m, _) = analytic_posterior(0.2, 0.7, 1.4, 1e12).unwrap();
    assert!((m - 0.2).abs() < 1e-9);
    assert!(analytic_posterior(0.0, 1.0, 1.0, 0.0).is_err());
}

#[test]
fn unguided_sampling_follows_the_prior() {
    let sched = schedule();
    let setup = OracleSetup::default();
    for seed in 0..5 {
        let r = oracle_check(&setup, &oracle_sampler_config(0.0), &sched, seed).unwrap();
        assert!(
            r.distance_to_prior_mean <= 3.0 * r.prior_standard_error,
            "seed {seed}: mean {} vs prior {}",
            r.empirical_mean,
            r.prior_mean
        );
        assert!(r.posterior_mean.is_none());
    }
}

#[test]
fn guidance_moves_the_mean_towards_y() {
    let sched = schedule();
    let setup = OracleSetup::default();
    let mut medians = Vec::new();
    for rho in [0.0, 1.0, 10.0, 50.0] {
        let mut d: Vec<f64> = (0..5)
            .map(|seed| {
                oracle_check(&setup, &oracle_sampler_config(rho), &sched, seed)
                    .unwrap()
                    .distance_to_y
            })
            .collect();
        d.sort_by(f64::total_cmp);
        medians.push(d[2]);
    }
    for w in medians.windows(2) {
        assert!(w[1] <= w[0], "{medians:?}");
    }
    let strong = oracle_check(&setup, &oracle_sampler_config(50.0), &sched, 0).unwrap();
    assert!(strong.distance_to_y < (setup.y - setup.prior_mean).abs());
}

#[test]
fn guided_mean_is_bracketed_by_prior_and_y() {
    let sched = schedule();
    let setup = OracleSetup::default();
    let r = oracle_check(&setup, &oracle_sampler_config(10.0), &sched, 1).unwrap();
    assert!(r.empirical_mean > setup.prior_mean && r.empirical_mean < setup.y, "{}", r.empirical_mean);
    assert!(r.distance_to_posterior_mean.unwrap() < r.distance_to_prior_mean);
    assert!((r.nominal_sigma2.unwrap() - 0.05).abs() < 1e-12);
}

#[test]
fn reports_are_deterministic() {
    let sched = schedule();
    let setup = OracleSetup {
        n_samples: 64,
        scale: OracleScale::Grid8,
        ..Default::default()
    };
    let cfg = oracle_sampler_config(10.0);
    let a = oracle_check(&setup, &cfg, &sched, 3).unwrap();
    let b = oracle_check(&setup, &cfg, &sched, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.scale, OracleScale::Grid8);
    assert!((a.prior_standard_error - (0.25f64 / (64.0 * 64.0)).sqrt()).abs() < 1e-15);
    assert!(oracle_check(&OracleSetup { n_samples: 1, ..setup }, &cfg, &sched, 3).is_err());
}
