mod common;

use common::{intercept_panel, mod6_scenario, permuted};
use proptest::prelude::*;
use ratekit::{
    fit_nb_glm, fit_poisson_glm, generate_panel, linear_predictor, nb_loglik_and_gradient, parse_panel_csv,
    ConditionalLaw, MixingDist,
};

fn small_panel() -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..6, 1..5), 3..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn csv_serialization_reparses_to_same_panel(counts in small_panel()) {
        let p = intercept_panel(&counts);
        prop_assert_eq!(parse_panel_csv(&p.to_csv_string()).unwrap(), p);
    }

    #[test]
    fn nb_likelihood_dominates_poisson(counts in small_panel()) {
        prop_assume!(counts.iter().flatten().any(|&n| n > 0));
        let p = intercept_panel(&counts);
        let pois = fit_poisson_glm(&p).unwrap();
        let nb = fit_nb_glm(&p).unwrap();
        prop_assert!(nb.loglik >= pois.loglik - 1e-9, "{} < {}", nb.loglik, pois.loglik);
    }
}

fn model1_panel(k: usize, seed: u64) -> ratekit::ClaimPanel {
    let s = mod6_scenario(k, 5, MixingDist::degenerate(), MixingDist::degenerate(), ConditionalLaw::Poisson, seed);
    generate_panel(&s, 0).unwrap()
}

#[test]
fn linear_predictor_ignores_policy_order() {
    let p = model1_panel(24, 3);
    let beta = [-0.5, 0.5, 0.5];
    let order: Vec<usize> = (0..24).rev().collect();
    let q = permuted(&p, &order);
    let lp = linear_predictor(&p, &beta).unwrap();
    let lq = linear_predictor(&q, &beta).unwrap();
    for (i, pol) in p.policies().enumerate() {
        let other = q.policy(23 - i);
        assert_eq!(pol.id(), other.id());
        assert_eq!(&lp[pol.cells()], &lq[other.cells()]);
    }
}

#[test]
fn estimates_ignore_policy_order() {
    let s = mod6_scenario(60, 5, MixingDist::degenerate(), MixingDist::gamma(0.4).unwrap(), ConditionalLaw::Poisson, 4);
    let p = generate_panel(&s, 0).unwrap();
    let order: Vec<usize> = (0..60).map(|i| (i * 7) % 60).collect();
    let q = permuted(&p, &order);
    for (a, b) in [(fit_poisson_glm(&p).unwrap(), fit_poisson_glm(&q).unwrap()), (fit_nb_glm(&p).unwrap(), fit_nb_glm(&q).unwrap())] {
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!((a.alpha - b.alpha).abs() < 1e-10);
    }
}

#[test]
fn poisson_fit_is_consistent_on_model1_data() {
    let p = model1_panel(5000, 5);
    let fit = fit_poisson_glm(&p).unwrap();
    assert!(fit.converged);
    let se = fit.standard_errors().unwrap();
    for ((b, t), s) in fit.beta.iter().zip([-0.5, 0.5, 0.5]).zip(se) {
        assert!((b - t).abs() < 3.0 * s, "beta {b} vs {t}, se {s}");
    }
}

#[test]
fn nb_fit_on_equidispersed_data_has_small_alpha() {
    let fit = fit_nb_glm(&model1_panel(2000, 6)).unwrap();
    assert!(fit.converged);
    assert!(fit.alpha < 0.02, "alpha {}", fit.alpha);
}

#[test]
fn nb_fit_recovers_alpha() {
    let mut s = mod6_scenario(5000, 1, MixingDist::degenerate(), MixingDist::degenerate(), ConditionalLaw::Negbin { alpha: 0.5 }, 8);
    s.covariate_design = ratekit::CovariateDesign::Uniform01Single;
    s.beta = vec![0.0, 0.0];
    let fit = fit_nb_glm(&generate_panel(&s, 0).unwrap()).unwrap();
    assert!(fit.converged);
    let se = fit.standard_errors().unwrap();
    let se_alpha = *se.last().unwrap();
    assert!((fit.alpha - 0.5).abs() < 3.0 * se_alpha, "alpha {} se {se_alpha}", fit.alpha);
}

#[test]
fn nb_fit_gradient_vanishes_at_optimum() {
    let s = mod6_scenario(200, 5, MixingDist::degenerate(), MixingDist::gamma(0.5).unwrap(), ConditionalLaw::Poisson, 9);
    let p = generate_panel(&s, 0).unwrap();
    let fit = fit_nb_glm(&p).unwrap();
    assert!(fit.alpha > 0.0);
    let (ll, g) = nb_loglik_and_gradient(&p, &fit.beta, fit.alpha).unwrap();
    assert!((ll - fit.loglik).abs() < 1e-8 * ll.abs());
    let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(gmax < 1e-8 * (1.0 + ll.abs()), "gradient max-norm {gmax}");
}
