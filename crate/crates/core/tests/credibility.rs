mod common;

use common::intercept_panel;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratekit::{
    buhlmann_factor, credibility_report, predictive_mse_from_fit, structural_params, Conditional, CredibilityModel,
    MixingDist, MixingKind, NbParams, PredictionTarget, ReFit, StructuralParams,
};

proptest! {
    #[test]
    fn nb_with_zero_alpha_nests_poisson(l in 0.05f64..20.0, s2 in 0.0f64..2.0, b in 0.0f64..2.0) {
        let p1 = structural_params(CredibilityModel::PoissonRe, l, s2, 0.0, b).unwrap();
        let p2 = structural_params(CredibilityModel::NbRe, l, s2, 0.0, b).unwrap();
        prop_assert_eq!(p1, p2);
    }

    #[test]
    fn saturated_with_zero_b_nests_nb(l in 0.05f64..20.0, s2 in 0.0f64..2.0, a in 0.0f64..3.0) {
        let p2 = structural_params(CredibilityModel::NbRe, l, s2, a, 0.0).unwrap();
        let p3 = structural_params(CredibilityModel::NbReSaturated, l, s2, a, 0.0).unwrap();
        prop_assert_eq!(p2, p3);
    }

    #[test]
    fn factor_is_monotone(
        t in 1usize..30,
        mu in 0.1f64..5.0,
        nu in 0.1f64..10.0,
        a in 0.01f64..10.0,
        bump in 0.01f64..2.0,
    ) {
        let s = StructuralParams { mu, nu, a };
        let z = buhlmann_factor(t, &s);
        prop_assert!(z > 0.0 && z < 1.0);
        prop_assert!(buhlmann_factor(t + 1, &s) > z);
        let more_a = StructuralParams { a: a + bump, ..s };
        let more_nu = StructuralParams { nu: nu + bump, ..s };
        prop_assert!(buhlmann_factor(t, &more_a) > z);
        prop_assert!(buhlmann_factor(t, &more_nu) < z);
    }

    #[test]
    fn zero_variance_fit_predicts_the_prior_rate(
        counts in prop::collection::vec(prop::collection::vec(0u64..9, 1..6), 1..8),
        b0 in -1.0f64..1.0,
        negbin in any::<bool>(),
    ) {
        let p = intercept_panel(&counts);
        let fit = flat_fit(b0, if negbin { 0.4 } else { 0.0 });
        let report = credibility_report(&p, &fit).unwrap();
        for row in &report.rows {
            prop_assert_eq!(row.z, 0.0);
            prop_assert!((row.prediction - b0.exp()).abs() < 1e-12);
        }
    }
}

fn flat_fit(b0: f64, alpha: f64) -> ReFit {
    ReFit {
        conditional: if alpha > 0.0 { Conditional::Negbin } else { Conditional::Poisson },
        re_dist: MixingKind::LognormalMeanOne,
        covariate_names: vec!["intercept".into()],
        beta: vec![b0],
        alpha,
        sigma2: 0.0,
        var_theta: 0.0,
        loglik: 0.0,
        iterations: 0,
        converged: true,
        status: "converged".into(),
        quadrature_nodes: 0,
    }
}

#[test]
fn constant_counts_at_the_prior_rate_have_zero_error() {
    let p = intercept_panel(&vec![vec![2; 4]; 6]);
    let mse = predictive_mse_from_fit(&p, &flat_fit(2f64.ln(), 0.0), PredictionTarget::Buhlmann).unwrap();
    assert!(mse.abs() < 1e-24);
}

/// Monte Carlo means of `E[N|theta]` and `Var[N|theta]` over draws of
/// `theta = (theta_i, theta_it)`, with `log theta_i ~ N(0, s2)` and a mean-one
/// gamma `theta_it` of variance `b`. `E[N|theta_i]` drives `a`.
fn mc_structural(lambda: f64, s2: f64, alpha: f64, b: f64, seed: u64) -> [(f64, f64); 3] {
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = MixingDist::lognormal(s2).unwrap();
    let sat = MixingDist::gamma(b).unwrap();
    let scale = (0.5 * s2).exp();
    let (mut m1, mut m2, mut v1, mut v2, mut c1, mut c2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let ti = shared.sample(&mut rng) * scale;
        let tit = sat.sample(&mut rng);
        let mean_i = lambda * ti;
        let mean = mean_i * tit;
        let var = NbParams::new(mean, alpha).unwrap().variance();
        m1 += mean;
        m2 += mean * mean;
        v1 += var;
        v2 += var * var;
        c1 += mean_i;
        c2 += mean_i * mean_i;
    }
    let nf = n as f64;
    let summary = |s1: f64, s2: f64| {
        let m = s1 / nf;
        (m, ((s2 / nf - m * m) / nf).sqrt())
    };
    let (cm, _) = summary(c1, c2);
    let cvar = c2 / nf - cm * cm;
    // delta-method SE of the sample variance through the fourth moment of a lognormal
    let k4 = (6.0 * s2).exp() * lambda.powi(4);
    let cvar_se = ((k4 - (c2 / nf).powi(2)) / nf).sqrt();
    [summary(m1, m2), summary(v1, v2), (cvar, cvar_se)]
}

#[test]
fn structural_parameters_match_monte_carlo() {
    let cases = [
        (CredibilityModel::PoissonRe, 1.3, 0.4, 0.0, 0.0),
        (CredibilityModel::NbRe, 0.8, 0.3, 0.6, 0.0),
        (CredibilityModel::NbReSaturated, 1.1, 0.2, 0.5, 0.5),
    ];
    for (j, (model, l, s2, alpha, b)) in cases.into_iter().enumerate() {
        let s = structural_params(model, l, s2, alpha, b).unwrap();
        let [(mu, mu_se), (nu, nu_se), (a, a_se)] = mc_structural(l, s2, alpha, b, 70 + j as u64);
        assert!((mu - s.mu).abs() < 3.0 * mu_se, "{model:?} mu {mu} vs {}", s.mu);
        assert!((nu - s.nu).abs() < 3.0 * nu_se, "{model:?} nu {nu} vs {}", s.nu);
        assert!((a - s.a).abs() < 3.0 * a_se, "{model:?} a {a} vs {}", s.a);
    }
}
