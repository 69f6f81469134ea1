use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{generate_panel, ConditionalLaw, CovariateDesign, Scenario};
use crate::credibility::{
    buhlmann_factor, predictive_mse_from_fit, structural_params_mean_one, CredibilityModel, PredictionTarget,
};
use crate::distributions::{MixingDist, MixingKind};
use crate::error::{Error, Result};
use crate::glm::{fit_nb_glm, fit_poisson_glm};
use crate::panel::{dot, ClaimPanel};
use crate::re::{fit_shared_re_with, Conditional, ReConfig, ReFit};
use crate::score::{nb_score_test, pinquet_statistic};

/// Cells with a larger share of failed replications are flagged.
pub const FAILURE_FLAG_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analysis {
    /// Poisson shared-effect fit to saturated-only data (k = 30).
    Table1,
    /// Shared lognormal plus saturated gamma effects under a Poisson conditional.
    Sim1,
    /// As `Sim1` with an NB conditional on top.
    Sim2,
    /// Size and power of the NB score test.
    Power,
    /// Bühlmann factors and hold-out error on `Sim1` data.
    Buhlmann1,
    /// Bühlmann factors and hold-out error on `Sim2` data.
    Buhlmann2,
    /// Pinquet rejection rate on saturated-only data as `k` grows.
    Theorem1,
}

impl Analysis {
    pub const ALL: [Analysis; 7] = [
        Analysis::Table1,
        Analysis::Sim1,
        Analysis::Sim2,
        Analysis::Power,
        Analysis::Buhlmann1,
        Analysis::Buhlmann2,
        Analysis::Theorem1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Table1 => "table1",
            Analysis::Sim1 => "sim1",
            Analysis::Sim2 => "sim2",
            Analysis::Power => "power",
            Analysis::Buhlmann1 => "buhlmann1",
            Analysis::Buhlmann2 => "buhlmann2",
            Analysis::Theorem1 => "theorem1",
        }
    }

    pub fn default_replications(self) -> usize {
        match self {
            Analysis::Power => 1000,
            Analysis::Theorem1 => 200,
            _ => 100,
        }
    }
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Analysis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Analysis::ALL.iter().map(|a| a.name()).collect();
            Error::domain(format!("unknown scenario `{s}`; valid names: {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Standard deviation across successful replications.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: String,
    pub k: usize,
    pub periods: usize,
    /// Variance parameter of the shared effect.
    pub sigma2: f64,
    /// Variance of the saturated effect.
    pub tau2: f64,
    /// NB dispersion of the generating conditional (0 for Poisson).
    pub alpha: f64,
    pub replications: usize,
    pub failures: usize,
    pub flagged: bool,
    pub first_failure: Option<String>,
    pub metrics: Vec<MetricSummary>,
}

impl CellSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub analysis: Analysis,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
}

impl SimSummary {
    /// Long format, one row per cell and metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,k,T,sigma2,tau2,alpha,metric,mean,spread,reps,failures,flagged\n");
        for c in &self.cells {
            for m in &c.metrics {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    c.scenario,
                    c.k,
                    c.periods,
                    c.sigma2,
                    c.tau2,
                    c.alpha,
                    m.metric,
                    m.mean,
                    m.spread,
                    c.replications,
                    c.failures,
                    c.flagged
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First cell matching the given parameters (within 1e-12).
    pub fn find(&self, k: Option<usize>, sigma2: Option<f64>, tau2: Option<f64>, alpha: Option<f64>) -> Option<&CellSummary> {
        let near = |want: Option<f64>, got: f64| want.is_none_or(|w| (w - got).abs() < 1e-12);
        self.cells
            .iter()
            .find(|c| k.is_none_or(|k| k == c.k) && near(sigma2, c.sigma2) && near(tau2, c.tau2) && near(alpha, c.alpha))
    }
}

/// Settings shared by all replications.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentOptions {
    pub level: f64,
    pub re_config: ReConfig,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            level: 0.05,
            re_config: ReConfig::default(),
        }
    }
}

type Metrics = Vec<(&'static str, f64)>;

fn sigma2_of(s: &Scenario) -> f64 {
    s.shared_effect.variance_parameter()
}

fn tau2_of(s: &Scenario) -> f64 {
    s.saturated_effect.theta_variance()
}

fn alpha_of(s: &Scenario) -> f64 {
    match s.conditional {
        ConditionalLaw::Poisson => 0.0,
        ConditionalLaw::Negbin { alpha } => alpha,
    }
}

fn converged_re(panel: &ClaimPanel, cond: Conditional, opts: &ExperimentOptions) -> Result<ReFit> {
    let fit = fit_shared_re_with(panel, cond, MixingKind::LognormalMeanOne, &opts.re_config)?;
    if !fit.converged {
        return Err(Error::Estimation(format!("{cond:?} shared-effect fit: {}", fit.status)));
    }
    Ok(fit)
}

fn mean_rates(panel: &ClaimPanel, beta: &[f64], periods: usize) -> Vec<f64> {
    panel
        .policies()
        .map(|p| (0..periods.min(p.len())).map(|t| dot(p.covariates(t), beta).exp()).sum::<f64>() / periods.min(p.len()) as f64)
        .collect()
}

fn factors(fit: &ReFit, rates: &[f64], t: usize) -> Result<Vec<f64>> {
    let model = match fit.conditional {
        Conditional::Poisson => CredibilityModel::PoissonRe,
        Conditional::Negbin => CredibilityModel::NbRe,
    };
    rates
        .iter()
        .map(|&l| Ok(buhlmann_factor(t, &structural_params_mean_one(model, l, fit.re_dist, fit.sigma2, fit.alpha, 0.0)?)))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mad(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Bühlmann factor with the generating parameters.
fn true_factors(s: &Scenario, analysis: Analysis, panel: &ClaimPanel) -> Result<Vec<f64>> {
    let rates = mean_rates(panel, &s.beta, s.periods);
    let (model, alpha, b) = match analysis {
        // gamma saturated effects under a Poisson conditional are NB with alpha = tau2
        Analysis::Buhlmann1 => (CredibilityModel::NbRe, tau2_of(s) + alpha_of(s), 0.0),
        _ => (CredibilityModel::NbReSaturated, alpha_of(s), tau2_of(s)),
    };
    rates
        .iter()
        .map(|&l| {
            let sp = structural_params_mean_one(model, l, MixingKind::LognormalMeanOne, sigma2_of(s), alpha, b)?;
            Ok(buhlmann_factor(s.periods, &sp))
        })
        .collect()
}

fn replicate(s: &Scenario, analysis: Analysis, rep: u64, opts: &ExperimentOptions) -> Result<Metrics> {
    let panel = generate_panel(s, rep)?;
    match analysis {
        Analysis::Table1 => {
            let m2 = converged_re(&panel, Conditional::Poisson, opts)?;
            Ok(vec![("sigma2_model2", m2.sigma2)])
        }
        Analysis::Sim1 | Analysis::Sim2 => {
            let m2 = converged_re(&panel, Conditional::Poisson, opts)?;
            let m4 = converged_re(&panel, Conditional::Negbin, opts)?;
            Ok(vec![
                ("sigma2_model2", m2.sigma2),
                ("sigma2_model4", m4.sigma2),
                ("alpha_model4", m4.alpha),
            ])
        }
        Analysis::Buhlmann1 | Analysis::Buhlmann2 => {
            let m2 = converged_re(&panel, Conditional::Poisson, opts)?;
            let m4 = converged_re(&panel, Conditional::Negbin, opts)?;
            let truth = true_factors(s, analysis, &panel)?;
            let z2 = factors(&m2, &mean_rates(&panel, &m2.beta, s.periods), s.periods)?;
            let z4 = factors(&m4, &mean_rates(&panel, &m4.beta, s.periods), s.periods)?;
            let train = panel.drop_last_periods(1)?;
            let h2 = converged_re(&train, Conditional::Poisson, opts)?;
            let h4 = converged_re(&train, Conditional::Negbin, opts)?;
            let mse2 = predictive_mse_from_fit(&panel, &h2, PredictionTarget::Buhlmann)?;
            let mse4 = predictive_mse_from_fit(&panel, &h4, PredictionTarget::Buhlmann)?;
            Ok(vec![
                ("z_true", mean(&truth)),
                ("z_model2", mean(&z2)),
                ("z_model4", mean(&z4)),
                ("mad_model2", mad(&z2, &truth)),
                ("mad_model4", mad(&z4, &truth)),
                ("mse_model2", mse2),
                ("mse_model4", mse4),
                ("mse_gap", mse2 - mse4),
            ])
        }
        Analysis::Power => {
            let fit = fit_nb_glm(&panel)?;
            let r = nb_score_test(&panel, &fit)?;
            Ok(vec![
                ("reject", f64::from(u8::from(r.rejects(opts.level)))),
                ("boundary_fallback", f64::from(u8::from(r.boundary_fallback))),
                ("statistic", r.statistic),
            ])
        }
        Analysis::Theorem1 => {
            let fit = fit_poisson_glm(&panel)?;
            if !fit.converged {
                return Err(Error::Estimation(format!("Poisson fit: {}", fit.status)));
            }
            let lam = crate::panel::linear_predictor(&panel, &fit.beta)?;
            let r = pinquet_statistic(&panel, &lam)?;
            Ok(vec![
                ("reject", f64::from(u8::from(r.rejects(opts.level)))),
                ("statistic", r.statistic),
            ])
        }
    }
}

/// Mean and sample standard deviation, accumulated in replication order.
fn summarize(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (m, (ss / (n - 1) as f64).sqrt())
}

/// Runs all replications of one scenario.
pub fn run_experiment(s: &Scenario, analysis: Analysis) -> Result<SimSummary> {
    run_experiment_with(s, analysis, &ExperimentOptions::default())
}

pub fn run_experiment_with(s: &Scenario, analysis: Analysis, opts: &ExperimentOptions) -> Result<SimSummary> {
    Ok(SimSummary {
        analysis,
        seed: s.seed,
        cells: vec![run_cell(s, analysis, opts)?],
    })
}

fn run_cell(s: &Scenario, analysis: Analysis, opts: &ExperimentOptions) -> Result<CellSummary> {
    s.validate()?;
    let results: Vec<Result<Metrics>> = (0..s.replications as u64)
        .into_par_iter()
        .map(|rep| replicate(s, analysis, rep, opts))
        .collect();
    let mut names: Vec<&'static str> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut failures = 0;
    let mut first_failure = None;
    for r in results {
        match r {
            Ok(metrics) => {
                for (name, v) in metrics {
                    let idx = names.iter().position(|n| *n == name).unwrap_or_else(|| {
                        names.push(name);
                        columns.push(Vec::new());
                        names.len() - 1
                    });
                    columns[idx].push(v);
                }
            }
            Err(e) => {
                failures += 1;
                first_failure.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let metrics = names
        .iter()
        .zip(&columns)
        .map(|(name, vals)| {
            let (mean, spread) = summarize(vals);
            MetricSummary {
                metric: name.to_string(),
                mean,
                spread,
            }
        })
        .collect();
    Ok(CellSummary {
        scenario: s.name.clone(),
        k: s.k,
        periods: s.periods,
        sigma2: sigma2_of(s),
        tau2: tau2_of(s),
        alpha: alpha_of(s),
        replications: s.replications,
        failures,
        flagged: failures as f64 > FAILURE_FLAG_RATE * s.replications as f64,
        first_failure,
        metrics,
    })
}

/// Grid overrides for [`run_study`]. `None` keeps the design's own axis.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyOptions {
    pub replications: Option<usize>,
    pub seed: u64,
    pub sigma2: Option<Vec<f64>>,
    pub tau2: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub k: Option<Vec<usize>>,
    pub experiment: ExperimentOptions,
}

const THIRDS: [f64; 4] = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
const SIXTHS: [f64; 4] = [0.0, 1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];

/// The scenarios making up an analysis' design, in output order.
pub fn study_scenarios(analysis: Analysis, opts: &StudyOptions) -> Result<Vec<Scenario>> {
    let reps = opts.replications.unwrap_or(analysis.default_replications());
    let pick = |o: &Option<Vec<f64>>, d: &[f64]| o.clone().unwrap_or_else(|| d.to_vec());
    let mod6 = |name: &str, k: usize, shared: MixingDist, sat: MixingDist, cond: ConditionalLaw| Scenario {
        name: name.to_string(),
        k,
        periods: 5,
        beta: vec![-0.5, 0.5, 0.5],
        covariate_design: CovariateDesign::Mod6Blocks,
        shared_effect: shared,
        saturated_effect: sat,
        conditional: cond,
        replications: reps,
        seed: opts.seed,
    };
    let fixed_cond = |a: Option<f64>| match a {
        Some(a) if a > 0.0 => ConditionalLaw::Negbin { alpha: a },
        _ => ConditionalLaw::Poisson,
    };
    let one_alpha = || -> Result<Option<f64>> {
        match opts.alpha.as_deref() {
            None => Ok(None),
            Some([a]) => Ok(Some(*a)),
            Some(_) => Err(Error::domain(format!("{analysis} takes a single --alpha value"))),
        }
    };
    let mut out = Vec::new();
    let name = analysis.name();
    match analysis {
        Analysis::Table1 | Analysis::Theorem1 => {
            let (ks, taus, sigmas) = if analysis == Analysis::Table1 {
                (vec![30], SIXTHS.to_vec(), vec![0.0])
            } else {
                (vec![30, 120, 480], vec![0.5], vec![0.0])
            };
            let alpha = one_alpha()?;
            for &k in opts.k.as_ref().unwrap_or(&ks) {
                for &s2 in &pick(&opts.sigma2, &sigmas) {
                    for &t2 in &pick(&opts.tau2, &taus) {
                        out.push(mod6(name, k, MixingDist::lognormal(s2)?, MixingDist::gamma(t2)?, fixed_cond(alpha)));
                    }
                }
            }
        }
        Analysis::Sim1 | Analysis::Sim2 | Analysis::Buhlmann1 | Analysis::Buhlmann2 => {
            let nb = matches!(analysis, Analysis::Sim2 | Analysis::Buhlmann2);
            let alpha = one_alpha()?;
            for &k in opts.k.as_ref().unwrap_or(&vec![120]) {
                for &s2 in &pick(&opts.sigma2, &SIXTHS) {
                    for &a in &pick(&opts.tau2, &THIRDS) {
                        // the NB conditional reuses the saturated variance unless overridden
                        let cond = if nb { fixed_cond(Some(alpha.unwrap_or(a))) } else { fixed_cond(alpha) };
                        out.push(mod6(name, k, MixingDist::lognormal(s2)?, MixingDist::gamma(a)?, cond));
                    }
                }
            }
        }
        Analysis::Power => {
            let sigmas: Vec<f64> = (0..=10).map(|j| j as f64 / 10.0).collect();
            for &k in opts.k.as_ref().unwrap_or(&vec![100]) {
                for &a in &pick(&opts.alpha, &[0.2, 0.5, 1.0]) {
                    for &s2 in &pick(&opts.sigma2, &sigmas) {
                        for &t2 in &pick(&opts.tau2, &[0.0]) {
                            out.push(Scenario {
                                name: name.to_string(),
                                k,
                                periods: 5,
                                beta: vec![0.0, 1.0],
                                covariate_design: CovariateDesign::Uniform01Single,
                                shared_effect: MixingDist::gamma(s2)?,
                                saturated_effect: MixingDist::gamma(t2)?,
                                conditional: ConditionalLaw::Negbin { alpha: a },
                                replications: reps,
                                seed: opts.seed,
                            });
                        }
                    }
                }
            }
        }
    }
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

/// Runs every cell of an analysis' design.
pub fn run_study(analysis: Analysis, opts: &StudyOptions) -> Result<SimSummary> {
    let cells = study_scenarios(analysis, opts)?
        .iter()
        .map(|s| run_cell(s, analysis, &opts.experiment))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimSummary {
        analysis,
        seed: opts.seed,
        cells,
    })
}
