#![allow(dead_code)]

use ratekit::panel::{Period, PolicyRecord};
use ratekit::{ClaimPanel, ConditionalLaw, CovariateDesign, MixingDist, Scenario};

/// Panel from per-policy `(counts, covariate rows)` with periods labelled `1..`.
pub fn panel(names: &[&str], policies: &[(Vec<u64>, Vec<Vec<f64>>)]) -> ClaimPanel {
    let records = policies
        .iter()
        .enumerate()
        .map(|(i, (counts, xs))| PolicyRecord {
            id: format!("p{i}"),
            periods: counts
                .iter()
                .zip(xs)
                .enumerate()
                .map(|(t, (&count, x))| Period {
                    period: t as i64 + 1,
                    count,
                    covariates: x.clone(),
                })
                .collect(),
        })
        .collect();
    ClaimPanel::from_records(names.iter().map(|s| s.to_string()).collect(), records).unwrap()
}

/// Intercept-only panel.
pub fn intercept_panel(counts: &[Vec<u64>]) -> ClaimPanel {
    let policies: Vec<_> = counts.iter().map(|c| (c.clone(), vec![vec![1.0]; c.len()])).collect();
    panel(&["intercept"], &policies)
}

pub fn permuted(panel: &ClaimPanel, order: &[usize]) -> ClaimPanel {
    let records = panel.to_records();
    let shuffled = order.iter().map(|&i| records[i].clone()).collect();
    ClaimPanel::from_records(panel.covariate_names().to_vec(), shuffled).unwrap()
}

/// Mod-6 design with `beta = (-0.5, 0.5, 0.5)`.
pub fn mod6_scenario(
    k: usize,
    periods: usize,
    shared: MixingDist,
    saturated: MixingDist,
    conditional: ConditionalLaw,
    seed: u64,
) -> Scenario {
    Scenario {
        name: "test".into(),
        k,
        periods,
        beta: vec![-0.5, 0.5, 0.5],
        covariate_design: CovariateDesign::Mod6Blocks,
        shared_effect: shared,
        saturated_effect: saturated,
        conditional,
        replications: 1,
        seed,
    }
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}
