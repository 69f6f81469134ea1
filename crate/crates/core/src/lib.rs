//! Claim-frequency models for experience ratemaking.
//!
//! The crate covers the Poisson and negative binomial (NB) claim-count models
//! with and without a shared policyholder random effect. It also provides
//! two score tests for whether a bonus-malus system is needed, Bühlmann
//! credibility premiums, and a seeded Monte Carlo lab for the simulation designs.
//!
//! Module map:
//! - [`distributions`]: NB/Poisson kernels, central moments, mean-one mixing laws
//! - [`panel`]: ragged longitudinal panels and CSV ingestion
//! - [`glm`]: Poisson and NB regression without random effects
//! - [`score`]: Pinquet's test and the NB-based test of `Var(theta_i) = 0`
//! - [`re`]: shared random-effect models fitted by closed form or adaptive quadrature
//! - [`credibility`]: structural parameters, Bühlmann factors, BM coefficients
//! - [`sim`]: scenario generators and experiment drivers
//! - [`cli`]: the `ratekit` command-line front end

pub mod cli;
pub mod credibility;
pub mod distributions;
pub mod error;
pub mod glm;
mod optimize;
pub mod panel;
pub mod quadrature;
pub mod re;
pub mod score;
pub mod sim;
pub mod special;

pub use credibility::{
    bm_coefficient, buhlmann_factor, buhlmann_predict, credibility_report, empirical_predictive_mse,
    predictive_mse_from_fit, structural_params, structural_params_mean_one, CredibilityModel, CredibilityReport,
    CredibilityRow, PredictionTarget, StructuralParams,
};
pub use distributions::{log_pmf, nb_central_moment, MixingDist, MixingKind, NbParams};
pub use error::{Error, Result};
pub use glm::{fit_nb_glm, fit_poisson_glm, nb_loglik_and_gradient, GlmConfig, GlmFamily, GlmFit};
pub use panel::{linear_predictor, parse_panel_csv, ClaimPanel, Period, PolicyRecord};
pub use re::{
    fit_shared_re, fit_shared_re_with, marginal_loglik, marginal_loglik_gradient, marginal_loglik_with, Conditional,
    ReConfig, ReFit,
};
pub use score::{
    bm_existence_report, nb_information_components, nb_score_contribution, nb_score_test,
    pinquet_statistic, BmExistenceReport, InfoComponents, ScoreTestResult,
};
pub use sim::{
    generate_panel, run_experiment, run_study, Analysis, ConditionalLaw, CovariateDesign, Scenario, SimSummary,
    StudyOptions,
};
