//! Poisson and negative binomial regression without random effects.
//!
//! Both fits maximise the log-likelihood by damped Newton steps. The NB
//! dispersion is carried as `alpha = q^2`: the log-likelihood is then an even,
//! smooth function of `q`, so the boundary `alpha = 0` is an ordinary stationary
//! point that Newton can land on instead of a limit it can only approach.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{nb_alpha_sums, nb_derivs, nb_log_pmf_with, POISSON_ALPHA};
use crate::error::{Error, Result};
use crate::optimize::{maximize, NewtonOptions, Objective};
use crate::panel::{dot, ClaimPanel};
use crate::special::{ln_factorial, ln_rising_scaled};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlmFamily {
    Poisson,
    Negbin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmConfig {
    pub max_iter: usize,
    /// Holds the NB dispersion fixed instead of estimating it.
    pub fixed_alpha: Option<f64>,
}

impl Default for GlmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            fixed_alpha: None,
        }
    }
}

/// A fitted fixed-effect count regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub family: GlmFamily,
    pub covariate_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Zero for Poisson.
    pub alpha: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
    /// Negative Hessian in `(beta)` or `(beta, alpha)` coordinates.
    pub observed_information: Vec<Vec<f64>>,
    /// Inverse of the observed information, absent when it is singular.
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl GlmFit {
    /// Standard errors from `covariance`, in the same order.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.len()).map(|j| c[j][j].max(0.0).sqrt()).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-cell constants that depend on the count only.
struct CellData {
    n: Vec<f64>,
    counts: Vec<u64>,
    ln_fact: Vec<f64>,
}

impl CellData {
    fn new(panel: &ClaimPanel) -> Self {
        let counts = panel.counts().to_vec();
        Self {
            n: counts.iter().map(|&c| c as f64).collect(),
            ln_fact: counts.iter().map(|&c| ln_factorial(c)).collect(),
            counts,
        }
    }
}

fn check_design(panel: &ClaimPanel) -> Result<()> {
    let p = panel.n_covariates();
    if p == 0 {
        return Err(Error::Estimation("the design has no covariate columns".into()));
    }
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    for c in 0..panel.n_cells() {
        let x = DVector::from_column_slice(panel.covariates(c));
        xtx.ger(1.0, &x, &x, 1.0);
    }
    let sv = xtx.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::Estimation(format!(
            "design matrix is rank deficient (singular values of X'X span {min:e}..{max:e})"
        )));
    }
    Ok(())
}

/// Least-squares fit of `ln(N + 1/2)` on `X`; the Newton starting point.
fn log_linear_start(panel: &ClaimPanel) -> Vec<f64> {
    let p = panel.n_covariates();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for (c, &n) in panel.counts().iter().enumerate() {
        let x = DVector::from_column_slice(panel.covariates(c));
        xtx.ger(1.0, &x, &x, 1.0);
        xty.axpy((n as f64 + 0.5).ln(), &x, 1.0);
    }
    match xtx.cholesky() {
        Some(ch) => ch.solve(&xty).iter().copied().collect(),
        None => vec![0.0; p],
    }
}

struct PoissonObjective<'a> {
    panel: &'a ClaimPanel,
    cells: &'a CellData,
}

impl Objective for PoissonObjective<'_> {
    fn value(&self, beta: &[f64]) -> Result<f64> {
        let mut ll = 0.0;
        for c in 0..self.panel.n_cells() {
            let eta = dot(self.panel.covariates(c), beta);
            ll += self.cells.n[c] * eta - eta.exp() - self.cells.ln_fact[c];
        }
        Ok(ll)
    }

    fn eval(&self, beta: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let p = beta.len();
        let mut ll = 0.0;
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for c in 0..self.panel.n_cells() {
            let xs = self.panel.covariates(c);
            let eta = dot(xs, beta);
            let mu = eta.exp();
            ll += self.cells.n[c] * eta - mu - self.cells.ln_fact[c];
            let x = DVector::from_column_slice(xs);
            g.axpy(self.cells.n[c] - mu, &x, 1.0);
            h.ger(-mu, &x, &x, 1.0);
        }
        Ok((ll, g, h))
    }
}

/// NB log-likelihood in `(beta, q)` with `alpha = q^2`, or in `beta` alone when
/// `fixed_alpha` is set.
struct NbObjective<'a> {
    panel: &'a ClaimPanel,
    cells: &'a CellData,
    fixed_alpha: Option<f64>,
}

impl NbObjective<'_> {
    fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], f64, f64) {
        match self.fixed_alpha {
            Some(a) => (x, a, a.sqrt()),
            None => {
                let p = x.len() - 1;
                (&x[..p], x[p] * x[p], x[p])
            }
        }
    }
}

fn snap_alpha(alpha: f64) -> f64 {
    if alpha < POISSON_ALPHA {
        0.0
    } else {
        alpha
    }
}

impl Objective for NbObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let (beta, alpha, _) = self.split(x);
        let alpha = snap_alpha(alpha);
        let mut ll = 0.0;
        for c in 0..self.panel.n_cells() {
            let mu = dot(self.panel.covariates(c), beta).exp();
            ll += nb_log_pmf_with(
                self.cells.n[c],
                mu,
                alpha,
                ln_rising_scaled(alpha, self.cells.counts[c]),
                self.cells.ln_fact[c],
            );
        }
        Ok(ll)
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let (beta, alpha_raw, q) = self.split(x);
        let alpha = snap_alpha(alpha_raw);
        let p = beta.len();
        let free = self.fixed_alpha.is_none();
        let dim = if free { p + 1 } else { p };
        let mut ll = 0.0;
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        let (mut g_a, mut h_aa) = (0.0, 0.0);
        let mut h_ba = DVector::zeros(p);
        for c in 0..self.panel.n_cells() {
            let xs = self.panel.covariates(c);
            let mu = dot(xs, beta).exp();
            let n = self.cells.counts[c];
            ll += nb_log_pmf_with(self.cells.n[c], mu, alpha, ln_rising_scaled(alpha, n), self.cells.ln_fact[c]);
            let (sa, sb) = nb_alpha_sums(alpha, n);
            let d = nb_derivs(self.cells.n[c], mu, alpha, sa, sb);
            let xv = DVector::from_column_slice(xs);
            g.rows_mut(0, p).axpy(d.d_xi, &xv, 1.0);
            h.view_mut((0, 0), (p, p)).ger(d.d_xixi, &xv, &xv, 1.0);
            if free {
                g_a += d.d_a;
                h_aa += d.d_aa;
                h_ba.axpy(d.d_xia, &xv, 1.0);
            }
        }
        if free {
            // chain rule for alpha = q^2
            g[p] = 2.0 * q * g_a;
            h[(p, p)] = 4.0 * q * q * h_aa + 2.0 * g_a;
            for j in 0..p {
                h[(j, p)] = 2.0 * q * h_ba[j];
                h[(p, j)] = h[(j, p)];
            }
        }
        Ok((ll, g, h))
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn covariance_of(info: &DMatrix<f64>) -> Option<Vec<Vec<f64>>> {
    info.clone().cholesky().map(|ch| to_rows(&ch.inverse()))
}

/// Poisson regression, `N_it ~ Pois(exp(x_it' beta))`.
pub fn fit_poisson_glm(panel: &ClaimPanel) -> Result<GlmFit> {
    fit_poisson_glm_with(panel, &GlmConfig::default())
}

pub fn fit_poisson_glm_with(panel: &ClaimPanel, config: &GlmConfig) -> Result<GlmFit> {
    check_design(panel)?;
    let cells = CellData::new(panel);
    let obj = PoissonObjective { panel, cells: &cells };
    let start = log_linear_start(panel);
    if panel.total_count() == 0 {
        let (ll, _, h) = obj.eval(&start)?;
        let info = -h;
        return Ok(GlmFit {
            family: GlmFamily::Poisson,
            covariate_names: panel.covariate_names().to_vec(),
            beta: start,
            alpha: 0.0,
            loglik: ll,
            iterations: 0,
            converged: false,
            status: "all counts are zero; the maximum likelihood estimate does not exist".into(),
            covariance: None,
            observed_information: to_rows(&info),
        });
    }
    let opts = NewtonOptions {
        max_iter: config.max_iter,
        ..NewtonOptions::default()
    };
    let r = maximize(&obj, &start, opts)?;
    let info = -&r.hessian;
    Ok(GlmFit {
        family: GlmFamily::Poisson,
        covariate_names: panel.covariate_names().to_vec(),
        beta: r.x,
        alpha: 0.0,
        loglik: r.value,
        iterations: r.iterations,
        converged: r.converged,
        status: r.status,
        covariance: covariance_of(&info),
        observed_information: to_rows(&info),
    })
}

/// NB regression, `N_it ~ NB(exp(x_it' beta), alpha)`, started from the
/// Poisson fit and a moment estimate of `alpha`.
pub fn fit_nb_glm(panel: &ClaimPanel) -> Result<GlmFit> {
    fit_nb_glm_with(panel, &GlmConfig::default())
}

pub fn fit_nb_glm_with(panel: &ClaimPanel, config: &GlmConfig) -> Result<GlmFit> {
    if let Some(a) = config.fixed_alpha {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::domain(format!("fixed alpha must be finite and >= 0, got {a}")));
        }
    }
    let pois = fit_poisson_glm_with(panel, config)?;
    if panel.total_count() == 0 {
        return Ok(GlmFit {
            family: GlmFamily::Negbin,
            observed_information: vec![],
            covariance: None,
            ..pois
        });
    }
    let cells = CellData::new(panel);
    let obj = NbObjective {
        panel,
        cells: &cells,
        fixed_alpha: config.fixed_alpha.map(snap_alpha),
    };
    let mut start = pois.beta.clone();
    if config.fixed_alpha.is_none() {
        let lambda = crate::panel::linear_predictor(panel, &pois.beta)?;
        let (num, den) = panel
            .counts()
            .iter()
            .zip(&lambda)
            .fold((0.0, 0.0), |(a, b), (&n, &l)| {
                let n = n as f64;
                (a + (n - l).powi(2) - n, b + l * l)
            });
        let alpha0 = (num / den).clamp(1e-3, 10.0);
        start.push(alpha0.sqrt());
    }
    let opts = NewtonOptions {
        max_iter: config.max_iter,
        ..NewtonOptions::default()
    };
    let r = maximize(&obj, &start, opts)?;
    let p = panel.n_covariates();
    let (beta, alpha) = match config.fixed_alpha {
        Some(a) => (r.x.clone(), snap_alpha(a)),
        None => (r.x[..p].to_vec(), snap_alpha(r.x[p] * r.x[p])),
    };
    let mut status = r.status.clone();
    if config.fixed_alpha.is_none() && alpha == 0.0 && r.converged {
        status = "converged; alpha at the Poisson boundary".into();
    }
    let info = nb_information_beta_alpha(panel, &beta, alpha, config.fixed_alpha.is_none())?;
    Ok(GlmFit {
        family: GlmFamily::Negbin,
        covariate_names: panel.covariate_names().to_vec(),
        beta,
        alpha,
        loglik: r.value,
        iterations: r.iterations,
        converged: r.converged,
        status,
        covariance: covariance_of(&info),
        observed_information: to_rows(&info),
    })
}

/// Observed information of the NB likelihood in `(beta, alpha)` coordinates.
fn nb_information_beta_alpha(panel: &ClaimPanel, beta: &[f64], alpha: f64, with_alpha: bool) -> Result<DMatrix<f64>> {
    let cells = CellData::new(panel);
    let obj = NbObjective {
        panel,
        cells: &cells,
        fixed_alpha: Some(alpha),
    };
    let (_, _, h_bb) = obj.eval(beta)?;
    let p = beta.len();
    if !with_alpha {
        return Ok(-h_bb);
    }
    let mut info = DMatrix::zeros(p + 1, p + 1);
    info.view_mut((0, 0), (p, p)).copy_from(&(-h_bb));
    for c in 0..panel.n_cells() {
        let xs = panel.covariates(c);
        let mu = dot(xs, beta).exp();
        let (sa, sb) = nb_alpha_sums(alpha, cells.counts[c]);
        let d = nb_derivs(cells.n[c], mu, alpha, sa, sb);
        for j in 0..p {
            info[(j, p)] -= d.d_xia * xs[j];
        }
        info[(p, p)] -= d.d_aa;
    }
    for j in 0..p {
        info[(p, j)] = info[(j, p)];
    }
    Ok(info)
}

/// NB log-likelihood and its gradient in `(beta, alpha)`; at `alpha = 0` the
/// alpha component is the right derivative.
pub fn nb_loglik_and_gradient(panel: &ClaimPanel, beta: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::domain(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let p = panel.n_covariates();
    if beta.len() != p {
        return Err(Error::domain(format!("beta has length {}, expected {p}", beta.len())));
    }
    let alpha = snap_alpha(alpha);
    let mut ll = 0.0;
    let mut grad = vec![0.0; p + 1];
    for (c, &n) in panel.counts().iter().enumerate() {
        let xs = panel.covariates(c);
        let mu = dot(xs, beta).exp();
        let nf = n as f64;
        ll += nb_log_pmf_with(nf, mu, alpha, ln_rising_scaled(alpha, n), ln_factorial(n));
        let (sa, sb) = nb_alpha_sums(alpha, n);
        let d = nb_derivs(nf, mu, alpha, sa, sb);
        for j in 0..p {
            grad[j] += d.d_xi * xs[j];
        }
        grad[p] += d.d_a;
    }
    Ok((ll, grad))
}
