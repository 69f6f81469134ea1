//! Bühlmann credibility under the shared random-effect models, the gamma
//! bonus-malus coefficient, and hold-out predictive error.

use serde::{Deserialize, Serialize};

use crate::distributions::MixingKind;
use crate::error::{Error, Result};
use crate::panel::{dot, ClaimPanel};
use crate::re::{fit_shared_re_with, Conditional, ReConfig, ReFit};

/// Per-policy structural parameters: `mu = E[E[N|theta]]`,
/// `nu = E[Var[N|theta]]`, `a = Var[E[N|theta]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralParams {
    pub mu: f64,
    pub nu: f64,
    pub a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CredibilityModel {
    /// Poisson conditional, shared effect.
    PoissonRe,
    /// NB conditional, shared effect.
    NbRe,
    /// NB conditional with shared and saturated effects; `b = Var(theta_it)`.
    NbReSaturated,
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be finite and >= 0, got {v}")))
    }
}

/// `(mu, nu, a)` with `log theta ~ N(0, sigma2)`, so `mu = lambda e^(sigma2/2)`.
///
/// `alpha` and `b` are ignored where the model has no such parameter.
pub fn structural_params(
    model: CredibilityModel,
    lambda: f64,
    sigma2: f64,
    alpha: f64,
    b: f64,
) -> Result<StructuralParams> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::domain(format!("lambda must be positive, got {lambda}")));
    }
    check_nonneg("sigma2", sigma2)?;
    check_nonneg("alpha", alpha)?;
    check_nonneg("b", b)?;
    let mu = lambda * (0.5 * sigma2).exp();
    let a = mu * mu * sigma2.exp_m1();
    let extra = match model {
        CredibilityModel::PoissonRe => 0.0,
        CredibilityModel::NbRe => alpha,
        CredibilityModel::NbReSaturated => alpha * (b + 1.0),
    };
    Ok(StructuralParams {
        mu,
        nu: mu + extra * mu * mu * sigma2.exp(),
        a,
    })
}

/// Structural parameters for a mean-one `theta` with the given mixing law, as
/// produced by the fitters and the simulation generators: `mu = lambda` and
/// `E[theta^2] = 1 + Var(theta)`.
pub fn structural_params_mean_one(
    model: CredibilityModel,
    lambda: f64,
    mixing: MixingKind,
    sigma2: f64,
    alpha: f64,
    b: f64,
) -> Result<StructuralParams> {
    match mixing {
        MixingKind::LognormalMeanOne => {
            check_nonneg("sigma2", sigma2)?;
            structural_params(model, lambda * (-0.5 * sigma2).exp(), sigma2, alpha, b)
        }
        MixingKind::GammaMeanOne | MixingKind::DegenerateOne => {
            let v = if mixing == MixingKind::DegenerateOne { 0.0 } else { sigma2 };
            // same closed forms with e^sigma2 replaced by E[theta^2] = 1 + v
            let ln_m2 = v.ln_1p();
            let mut s = structural_params(model, lambda * (-0.5 * ln_m2).exp(), ln_m2, alpha, b)?;
            s.mu = lambda;
            s.a = lambda * lambda * v;
            Ok(s)
        }
    }
}

/// `Z = T / (nu/a + T)`, zero when `a = 0`.
pub fn buhlmann_factor(t: usize, s: &StructuralParams) -> f64 {
    if s.a <= 0.0 {
        return 0.0;
    }
    let t = t as f64;
    t / (s.nu / s.a + t)
}

/// `P = Z mean + (1 - Z) mu`.
pub fn buhlmann_predict(z: f64, sample_mean: f64, mu: f64) -> f64 {
    z * sample_mean + (1.0 - z) * mu
}

/// Posterior mean of `theta ~ Gamma(a, a)` given Poisson counts:
/// `(a + sum N) / (a + sum lambda)`.
pub fn bm_coefficient(a_gamma: f64, counts: &[u64], lambdas: &[f64]) -> Result<f64> {
    if !(a_gamma.is_finite() && a_gamma > 0.0) {
        return Err(Error::domain(format!("gamma shape must be positive, got {a_gamma}")));
    }
    if counts.len() != lambdas.len() {
        return Err(Error::domain("counts and lambdas differ in length"));
    }
    let n: u64 = counts.iter().sum();
    let l: f64 = lambdas.iter().sum();
    Ok((a_gamma + n as f64) / (a_gamma + l))
}

/// Credibility model implied by a fit's conditional law.
pub fn model_of(fit: &ReFit) -> CredibilityModel {
    match fit.conditional {
        Conditional::Poisson => CredibilityModel::PoissonRe,
        Conditional::Negbin => CredibilityModel::NbRe,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibilityRow {
    pub id: String,
    pub t: usize,
    pub mean: f64,
    pub mu: f64,
    pub nu: f64,
    pub a: f64,
    pub z: f64,
    pub prediction: f64,
    /// Only for Poisson–gamma fits.
    pub bm_coefficient: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibilityReport {
    pub model: CredibilityModel,
    pub rows: Vec<CredibilityRow>,
    /// Some policy's rates differ across periods by more than 1e-9 relative;
    /// the structural formulas then use the per-policy mean rate.
    pub lambda_varies: bool,
    pub predictive_mse: Option<f64>,
}

impl CredibilityReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "T", "mean", "mu", "nu", "a", "z", "prediction", "bm_coefficient"])
            .map_err(csv_err)?;
        for r in &self.rows {
            let bm = r.bm_coefficient.map_or(String::new(), |b| b.to_string());
            w.write_record([
                r.id.clone(),
                r.t.to_string(),
                r.mean.to_string(),
                r.mu.to_string(),
                r.nu.to_string(),
                r.a.to_string(),
                r.z.to_string(),
                r.prediction.to_string(),
                bm,
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::numerical(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn policy_rates(panel: &ClaimPanel, beta: &[f64], i: usize) -> Vec<f64> {
    let pol = panel.policy(i);
    (0..pol.len()).map(|t| dot(pol.covariates(t), beta).exp()).collect()
}

fn check_fit(panel: &ClaimPanel, fit: &ReFit) -> Result<()> {
    if fit.covariate_names != panel.covariate_names() {
        return Err(Error::domain(format!(
            "fit covariates {:?} do not match panel covariates {:?}",
            fit.covariate_names,
            panel.covariate_names()
        )));
    }
    Ok(())
}

/// Per-policy credibility quantities under a fitted shared random-effect model.
pub fn credibility_report(panel: &ClaimPanel, fit: &ReFit) -> Result<CredibilityReport> {
    check_fit(panel, fit)?;
    let model = model_of(fit);
    let gamma_bm = fit.conditional == Conditional::Poisson && fit.re_dist == MixingKind::GammaMeanOne && fit.sigma2 > 0.0;
    let mut lambda_varies = false;
    let mut rows = Vec::with_capacity(panel.n_policies());
    for (i, pol) in panel.policies().enumerate() {
        let rates = policy_rates(panel, &fit.beta, i);
        let t = rates.len();
        let lam_bar = rates.iter().sum::<f64>() / t as f64;
        let (lo, hi) = rates.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| (lo.min(l), hi.max(l)));
        if hi - lo > 1e-9 * hi {
            lambda_varies = true;
        }
        let s = structural_params_mean_one(model, lam_bar, fit.re_dist, fit.sigma2, fit.alpha, 0.0)?;
        let mean = pol.total_count() as f64 / t as f64;
        let z = buhlmann_factor(t, &s);
        let bm = if gamma_bm {
            Some(bm_coefficient(1.0 / fit.sigma2, pol.counts(), &rates)?)
        } else {
            None
        };
        rows.push(CredibilityRow {
            id: pol.id().to_string(),
            t,
            mean,
            mu: s.mu,
            nu: s.nu,
            a: s.a,
            z,
            prediction: buhlmann_predict(z, mean, s.mu),
            bm_coefficient: bm,
        });
    }
    Ok(CredibilityReport {
        model,
        rows,
        lambda_varies,
        predictive_mse: None,
    })
}

/// What the held-out count is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionTarget {
    /// Bühlmann prediction from the training periods.
    #[default]
    Buhlmann,
    /// The fitted a priori rate for the held-out period.
    PriorRate,
}

/// Mean over policies of `(N_last - P)^2`, where `fit` was estimated on the
/// panel without each policy's last period.
pub fn predictive_mse_from_fit(panel: &ClaimPanel, fit: &ReFit, target: PredictionTarget) -> Result<f64> {
    check_fit(panel, fit)?;
    let model = model_of(fit);
    let mut total = 0.0;
    for (i, pol) in panel.policies().enumerate() {
        let t = pol.len();
        if t < 2 {
            return Err(Error::domain(format!(
                "policy `{}` has a single period; a hold-out needs at least two",
                pol.id()
            )));
        }
        let rates = policy_rates(panel, &fit.beta, i);
        let held = pol.counts()[t - 1] as f64;
        let pred = match target {
            PredictionTarget::PriorRate => rates[t - 1],
            PredictionTarget::Buhlmann => {
                let train = &rates[..t - 1];
                let lam_bar = train.iter().sum::<f64>() / (t - 1) as f64;
                let s = structural_params_mean_one(model, lam_bar, fit.re_dist, fit.sigma2, fit.alpha, 0.0)?;
                let mean = pol.counts()[..t - 1].iter().sum::<u64>() as f64 / (t - 1) as f64;
                buhlmann_predict(buhlmann_factor(t - 1, &s), mean, s.mu)
            }
        };
        total += (held - pred).powi(2);
    }
    Ok(total / panel.n_policies() as f64)
}

/// Refits `fit`'s model on all but each policy's last period and returns the
/// hold-out predictive MSE of the Bühlmann predictions.
pub fn empirical_predictive_mse(panel: &ClaimPanel, fit: &ReFit, config: &ReConfig) -> Result<f64> {
    if let Some(p) = panel.policies().find(|p| p.len() < 2) {
        return Err(Error::domain(format!(
            "policy `{}` has a single period; a hold-out needs at least two",
            p.id()
        )));
    }
    let train = panel.drop_last_periods(1)?;
    let refit = fit_shared_re_with(&train, fit.conditional, fit.re_dist, config)?;
    predictive_mse_from_fit(panel, &refit, PredictionTarget::Buhlmann)
}
