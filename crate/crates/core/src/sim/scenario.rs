use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::{substream, Purpose, POLICY_LEVEL};
use crate::distributions::{MixingDist, NbParams};
use crate::error::{Error, Result};
use crate::panel::ClaimPanel;

/// Rows cycled through by policy index; policy `i` (1-based) takes row `(i - 1) mod 6`.
pub const MOD6_ROWS: [[f64; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [1.0, 1.0, 2.0],
    [1.0, 2.0, 1.0],
    [1.0, 2.0, 2.0],
    [1.0, 3.0, 1.0],
    [1.0, 3.0, 2.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateDesign {
    /// Intercept plus two block covariates from [`MOD6_ROWS`].
    Mod6Blocks,
    /// Intercept plus one `U(0,1)` covariate drawn per cell.
    Uniform01Single,
}

impl CovariateDesign {
    pub fn names(self) -> Vec<String> {
        match self {
            CovariateDesign::Mod6Blocks => vec!["intercept".into(), "x1".into(), "x2".into()],
            CovariateDesign::Uniform01Single => vec!["intercept".into(), "x".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum ConditionalLaw {
    Poisson,
    Negbin { alpha: f64 },
}

/// One data-generating process: `N_it | theta_i, theta_it ~ f(lambda_it theta_i theta_it)`
/// with `log lambda_it = x_it' beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub k: usize,
    pub periods: usize,
    pub beta: Vec<f64>,
    pub covariate_design: CovariateDesign,
    pub shared_effect: MixingDist,
    pub saturated_effect: MixingDist,
    pub conditional: ConditionalLaw,
    pub replications: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.periods == 0 || self.replications == 0 {
            return Err(Error::domain("k, periods and replications must be positive"));
        }
        let p = self.covariate_design.names().len();
        if self.beta.len() != p {
            return Err(Error::domain(format!(
                "beta has length {}, the covariate design has {p} columns",
                self.beta.len()
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::domain("beta must be finite"));
        }
        if let ConditionalLaw::Negbin { alpha } = self.conditional {
            if !(alpha.is_finite() && alpha >= 0.0) {
                return Err(Error::domain(format!("alpha must be finite and >= 0, got {alpha}")));
            }
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        match self.conditional {
            ConditionalLaw::Poisson => 0.0,
            ConditionalLaw::Negbin { alpha } => alpha,
        }
    }

    /// Design row for policy `i` (0-based), period `t`.
    pub fn covariates(&self, replication: u64, i: usize, t: usize) -> Vec<f64> {
        match self.covariate_design {
            CovariateDesign::Mod6Blocks => MOD6_ROWS[i % 6].to_vec(),
            CovariateDesign::Uniform01Single => {
                let mut rng = substream(self.seed, replication, i as u64, t as u64, Purpose::Covariate);
                vec![1.0, rng.random::<f64>()]
            }
        }
    }
}

/// Draws one replication of `s`.
pub fn generate_panel(s: &Scenario, replication_index: u64) -> Result<ClaimPanel> {
    s.validate()?;
    let alpha = s.alpha();
    let names = s.covariate_design.names();
    let cells = s.k * s.periods;
    let mut counts = Vec::with_capacity(cells);
    let mut design = Vec::with_capacity(cells * names.len());
    for i in 0..s.k {
        let pi = i as u64;
        let theta_i = s
            .shared_effect
            .sample(&mut substream(s.seed, replication_index, pi, POLICY_LEVEL, Purpose::SharedEffect));
        for t in 0..s.periods {
            let x = s.covariates(replication_index, i, t);
            let lambda = crate::panel::dot(&x, &s.beta).exp();
            let theta_it = s
                .saturated_effect
                .sample(&mut substream(s.seed, replication_index, pi, t as u64, Purpose::SaturatedEffect));
            let mean = lambda * theta_i * theta_it;
            let mut rng = substream(s.seed, replication_index, pi, t as u64, Purpose::Count);
            let n = if mean > 0.0 {
                NbParams::new(mean, alpha)?.sample(&mut rng)
            } else {
                0
            };
            counts.push(n);
            design.extend_from_slice(&x);
        }
    }
    let ids = (1..=s.k).map(|i| format!("P{i:04}")).collect();
    let periods = vec![s.periods; s.k];
    Ok(ClaimPanel::from_flat(names, ids, &periods, counts, design))
}
