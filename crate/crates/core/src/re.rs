//! Shared random-effect models `N_it | theta_i ~ f(. ; lambda_it theta_i)` with a
//! mean-one `theta_i` integrated out.
//!
//! `f` is Poisson or NB(., alpha); `theta_i` is gamma or lognormal. Poisson with
//! gamma mixing has a closed-form marginal. Everything else is integrated per
//! policy by adaptive Gauss–Hermite quadrature centred at the posterior mode.
//! Lognormal effects are integrated in the standardised variable `z`, with
//! `log theta = -sigma^2/2 + sigma z`. Gamma effects are integrated in
//! `eta = log theta` through a tail-straightening map.
//!
//! The optimiser works on `(beta, q, s)` with `alpha = q^2` and `sigma^2 = s^2`.
//! The marginal likelihood is even and smooth in `q` and `s`, so the
//! `sigma^2 = 0` boundary is reached by ordinary Newton steps.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{nb_alpha_sums, nb_derivs, nb_log_pmf_with, MixingKind, POISSON_ALPHA};
use crate::error::{Error, Result};
use crate::glm::{fit_nb_glm, fit_poisson_glm, GlmFit};
use crate::optimize::{maximize, NewtonOptions, Objective};
use crate::panel::{dot, ClaimPanel};
use crate::quadrature::GaussHermite;
use crate::special::{
    expm1_minus_x, ln_factorial, ln_rising_scaled, log_minus_digamma, log_sum_exp, stirling_tail, trigamma_minus_inv,
};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this `sigma^2` the marginal is replaced by its first-order expansion
/// `l_0 + sigma^2 T_i`, which is exact to `O(sigma^4)`. The gamma density on the log
/// scale loses digits to cancellation well before the lognormal one does.
const GAMMA_DEGENERATE_V: f64 = 1e-8;
const LOGNORMAL_DEGENERATE_V: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditional {
    Poisson,
    Negbin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReConfig {
    /// Gauss–Hermite nodes per policy.
    pub nodes: usize,
    pub max_iter: usize,
    /// Integrate Poisson–gamma numerically instead of in closed form.
    pub force_quadrature: bool,
}

impl Default for ReConfig {
    fn default() -> Self {
        Self {
            nodes: 32,
            max_iter: 200,
            force_quadrature: false,
        }
    }
}

/// A fitted shared random-effect model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReFit {
    pub conditional: Conditional,
    pub re_dist: MixingKind,
    pub covariate_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Zero for the Poisson conditional.
    pub alpha: f64,
    /// `Var(theta)` for gamma mixing; the log-scale variance for lognormal.
    pub sigma2: f64,
    /// `Var(theta)` in both cases.
    pub var_theta: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
    /// Zero when the closed-form marginal was used.
    pub quadrature_nodes: usize,
}

impl ReFit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn var_theta(kind: MixingKind, sigma2: f64) -> f64 {
    match kind {
        MixingKind::LognormalMeanOne => sigma2.exp_m1(),
        _ => sigma2,
    }
}

fn snap(v: f64) -> f64 {
    if v < POISSON_ALPHA {
        0.0
    } else {
        v
    }
}

/// Model specification fixed across one optimisation.
struct Model<'a> {
    panel: &'a ClaimPanel,
    conditional: Conditional,
    kind: MixingKind,
    rule: Option<GaussHermite>,
    n: Vec<f64>,
    ln_fact: Vec<f64>,
}

/// Parameter-dependent quantities shared by all policies in one evaluation.
struct State {
    alpha: f64,
    q: f64,
    s: f64,
    xi: Vec<f64>,
    ln_rise: Vec<f64>,
    a_sum: Vec<f64>,
    b_sum: Vec<f64>,
}

/// One policy's log-marginal and optionally its derivatives in `(beta, q, s)`.
struct PolicyEval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl<'a> Model<'a> {
    fn new(panel: &'a ClaimPanel, conditional: Conditional, kind: MixingKind, config: &ReConfig) -> Result<Self> {
        if kind == MixingKind::DegenerateOne {
            return Err(Error::domain("random-effect models need gamma or lognormal mixing"));
        }
        let closed = conditional == Conditional::Poisson && kind == MixingKind::GammaMeanOne && !config.force_quadrature;
        let rule = if closed { None } else { Some(GaussHermite::new(config.nodes)?) };
        let counts = panel.counts();
        Ok(Self {
            panel,
            conditional,
            kind,
            rule,
            n: counts.iter().map(|&c| c as f64).collect(),
            ln_fact: counts.iter().map(|&c| ln_factorial(c)).collect(),
        })
    }

    fn has_q(&self) -> bool {
        self.conditional == Conditional::Negbin
    }

    fn dim(&self) -> usize {
        self.panel.n_covariates() + usize::from(self.has_q()) + 1
    }

    fn state(&self, x: &[f64]) -> State {
        let p = self.panel.n_covariates();
        let beta = &x[..p];
        let (alpha, q) = if self.has_q() { (snap(x[p] * x[p]), x[p]) } else { (0.0, 0.0) };
        let s = x[x.len() - 1];
        let xi = (0..self.panel.n_cells()).map(|c| dot(self.panel.covariates(c), beta)).collect();
        let counts = self.panel.counts();
        let ln_rise = counts.iter().map(|&n| ln_rising_scaled(alpha, n)).collect();
        let (a_sum, b_sum) = counts.iter().map(|&n| nb_alpha_sums(alpha, n)).unzip();
        State {
            alpha,
            q,
            s,
            xi,
            ln_rise,
            a_sum,
            b_sum,
        }
    }

    fn total(&self, x: &[f64], derivs: bool) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let st = self.state(x);
        let d = self.dim();
        let mut value = 0.0;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..self.panel.n_policies() {
            let e = self.policy(&st, i, derivs)?;
            value += e.value;
            if derivs {
                grad += e.grad;
                hess += e.hess;
            }
        }
        Ok((value, grad, hess))
    }

    fn policy(&self, st: &State, i: usize, derivs: bool) -> Result<PolicyEval> {
        let v = st.s * st.s;
        match (self.kind, &self.rule) {
            (MixingKind::GammaMeanOne, None) => Ok(self.poisson_gamma_closed(st, i, derivs)),
            (MixingKind::GammaMeanOne, Some(_)) if v < GAMMA_DEGENERATE_V => Ok(self.degenerate(st, i, derivs)),
            (MixingKind::LognormalMeanOne, Some(_)) if v < LOGNORMAL_DEGENERATE_V => Ok(self.degenerate(st, i, derivs)),
            (_, Some(rule)) => self.quadrature(st, i, rule, derivs),
            _ => unreachable!("lognormal mixing always carries a quadrature rule"),
        }
    }

    /// `h(eta) = sum_t log f(n_t; exp(xi_t + eta))` with its first two `eta`-derivatives.
    fn conditional_h(&self, st: &State, i: usize, eta: f64) -> (f64, f64, f64) {
        let pol = self.panel.policy(i);
        let a = st.alpha;
        let (mut h, mut h1, mut h2) = (0.0, 0.0, 0.0);
        for c in pol.cells() {
            let mu = (st.xi[c] + eta).exp();
            let n = self.n[c];
            h += nb_log_pmf_with(n, mu, a, st.ln_rise[c], self.ln_fact[c]);
            let opx = 1.0 + a * mu;
            h1 += (n - mu) / opx;
            h2 -= mu * (1.0 + a * n) / (opx * opx);
        }
        (h, h1, h2)
    }

    /// Adds the conditional-likelihood part of the parameter derivatives at
    /// `eta`, weighted by `w`, and returns the `(beta, q)` gradient of `h`.
    fn conditional_param_derivs(
        &self,
        st: &State,
        i: usize,
        eta: f64,
        w: f64,
        hess: &mut DMatrix<f64>,
        s_weight: Option<f64>,
    ) -> (DVector<f64>, f64) {
        let pol = self.panel.policy(i);
        let p = self.panel.n_covariates();
        let d = self.dim();
        let qi = p;
        let si = d - 1;
        let mut g = DVector::zeros(d);
        let (mut la, mut laa) = (0.0, 0.0);
        let mut h1 = 0.0;
        for c in pol.cells() {
            let mu = (st.xi[c] + eta).exp();
            let dv = nb_derivs(self.n[c], mu, st.alpha, st.a_sum[c], st.b_sum[c]);
            let xs = self.panel.covariates(c);
            h1 += dv.d_xi;
            for j in 0..p {
                g[j] += dv.d_xi * xs[j];
                for k in 0..=j {
                    hess[(j, k)] += w * dv.d_xixi * xs[j] * xs[k];
                }
            }
            if self.has_q() {
                la += dv.d_a;
                laa += dv.d_aa;
                for j in 0..p {
                    hess[(qi, j)] += w * 2.0 * st.q * dv.d_xia * xs[j];
                }
            }
            if let Some(sw) = s_weight {
                // lognormal: d eta / ds = z - s, so d^2/(dbeta ds) picks up l_xixi (z - s)
                for j in 0..p {
                    hess[(si, j)] += w * dv.d_xixi * sw * xs[j];
                }
                if self.has_q() {
                    hess[(si, qi)] += w * 2.0 * st.q * dv.d_xia * sw;
                }
            }
        }
        if self.has_q() {
            g[qi] = 2.0 * st.q * la;
            hess[(qi, qi)] += w * (4.0 * st.q * st.q * laa + 2.0 * la);
        }
        (g, h1)
    }

    /// `sigma^2 -> 0` expansion `l_0 + s^2 T_i` with `T_i = (h'^2 + h'' - h')/2` at `eta = 0`.
    fn degenerate(&self, st: &State, i: usize, derivs: bool) -> PolicyEval {
        let (h, h1, h2) = self.conditional_h(st, i, 0.0);
        let t = 0.5 * (h1 * h1 + h2 - h1);
        let v = st.s * st.s;
        let d = self.dim();
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        if derivs {
            // The O(s^2) corrections to the beta and q derivatives are dropped.
            let (g, _) = self.conditional_param_derivs(st, i, 0.0, 1.0, &mut hess, None);
            grad.copy_from(&g);
            grad[d - 1] = 2.0 * st.s * t;
            hess[(d - 1, d - 1)] = 2.0 * t;
            symmetrize_lower(&mut hess);
        }
        PolicyEval {
            value: h + v * t,
            grad,
            hess,
        }
    }

    /// Closed-form Poisson–gamma marginal:
    /// `log NB(S | Lambda, v) + sum_t n_t xi_t - sum_t ln n_t! + ln S! - S ln Lambda`.
    fn poisson_gamma_closed(&self, st: &State, i: usize, derivs: bool) -> PolicyEval {
        let pol = self.panel.policy(i);
        let p = self.panel.n_covariates();
        let d = self.dim();
        let v = snap(st.s * st.s);
        let total = pol.total_count();
        let s_n = total as f64;
        let mut lam_sum = 0.0;
        let mut lin = 0.0;
        let mut lf = 0.0;
        for c in pol.cells() {
            lam_sum += st.xi[c].exp();
            lin += self.n[c] * st.xi[c];
            lf += self.ln_fact[c];
        }
        let ln_lam = lam_sum.ln();
        let nb = nb_log_pmf_with(s_n, lam_sum, v, ln_rising_scaled(v, total), ln_factorial(total));
        let value = nb + lin - lf + ln_factorial(total) - s_n * ln_lam;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        if derivs {
            let (sa, sb) = nb_alpha_sums(v, total);
            let dv = nb_derivs(s_n, lam_sum, v, sa, sb);
            let mut xbar = DVector::zeros(p);
            let mut xx = DMatrix::zeros(p, p);
            let mut nx = DVector::zeros(p);
            for c in pol.cells() {
                let pi = st.xi[c].exp() / lam_sum;
                let x = DVector::from_column_slice(self.panel.covariates(c));
                xbar.axpy(pi, &x, 1.0);
                xx.ger(pi, &x, &x, 1.0);
                nx.axpy(self.n[c], &x, 1.0);
            }
            let coef = dv.d_xi - s_n;
            let gb = &xbar * coef + nx;
            grad.rows_mut(0, p).copy_from(&gb);
            let hb = &xbar * xbar.transpose() * dv.d_xixi + (xx - &xbar * xbar.transpose()) * coef;
            hess.view_mut((0, 0), (p, p)).copy_from(&hb);
            let si = d - 1;
            grad[si] = 2.0 * st.s * dv.d_a;
            hess[(si, si)] = 4.0 * v * dv.d_aa + 2.0 * dv.d_a;
            for j in 0..p {
                hess[(si, j)] = 2.0 * st.s * dv.d_xia * xbar[j];
                hess[(j, si)] = hess[(si, j)];
            }
        }
        PolicyEval { value, grad, hess }
    }

    /// Log integrand in the integration variable `u` and its first two derivatives.
    fn integrand(&self, st: &State, i: usize, u: f64) -> (f64, f64, f64) {
        match self.kind {
            MixingKind::LognormalMeanOne => {
                let s = st.s;
                let eta = -0.5 * s * s + s * u;
                let (h, h1, h2) = self.conditional_h(st, i, eta);
                (h - 0.5 * u * u - HALF_LN_2PI, s * h1 - u, s * s * h2 - 1.0)
            }
            _ => {
                let r = 1.0 / (st.s * st.s);
                let (h, h1, h2) = self.conditional_h(st, i, u);
                let e = u.exp();
                (h + gamma_log_density(r, u), h1 + r * (1.0 - e), h2 - r * e)
            }
        }
    }

    fn quadrature(&self, st: &State, i: usize, rule: &GaussHermite, derivs: bool) -> Result<PolicyEval> {
        let (mode, curv) = self.find_mode(st, i)?;
        let (us, logw) = match self.kind {
            MixingKind::LognormalMeanOne => self.hermite_nodes(st, i, rule, mode, curv)?,
            _ => self.gamma_nodes(st, i, rule, mode, curv)?,
        };
        let m = us.len();
        let value = log_sum_exp(&logw);
        if !value.is_finite() {
            return Err(Error::numerical(format!(
                "marginal likelihood underflows for policy `{}` (mode={mode}, curvature={curv})",
                self.panel.policy(i).id()
            )));
        }
        let d = self.dim();
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        if !derivs {
            return Ok(PolicyEval { value, grad, hess });
        }
        let si = d - 1;
        let s = st.s;
        let mut node_grads = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        for (k, &u) in us.iter().enumerate() {
            let w = (logw[k] - value).exp();
            let (eta, s_weight) = match self.kind {
                MixingKind::LognormalMeanOne => (-0.5 * s * s + s * u, Some(u - s)),
                _ => (u, None),
            };
            let (mut g, h1) = self.conditional_param_derivs(st, i, eta, w, &mut hess, s_weight);
            match self.kind {
                MixingKind::LognormalMeanOne => {
                    let (_, _, h2) = self.conditional_h(st, i, eta);
                    let zs = u - s;
                    g[si] = h1 * zs;
                    hess[(si, si)] += w * (h2 * zs * zs - h1);
                }
                _ => {
                    let (d1, d2) = gamma_log_density_s_derivs(s, u);
                    g[si] = d1;
                    hess[(si, si)] += w * d2;
                }
            }
            grad.axpy(w, &g, 1.0);
            node_grads.push(g);
            weights.push(w);
        }
        symmetrize_lower(&mut hess);
        // Hessian of log E = E[d2 g] + Cov(d g)
        for (g, w) in node_grads.iter().zip(&weights) {
            let dev = g - &grad;
            hess.ger(*w, &dev, &dev, 1.0);
        }
        Ok(PolicyEval { value, grad, hess })
    }

    /// Gauss–Hermite nodes centred at the mode and scaled by the curvature there.
    fn hermite_nodes(&self, st: &State, i: usize, rule: &GaussHermite, mode: f64, curv: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let scale = (-1.0 / curv).sqrt();
        let log_jac = (SQRT_2 * scale).ln();
        let mut us = Vec::with_capacity(rule.len());
        let mut logw = Vec::with_capacity(rule.len());
        for (x, lw) in rule.nodes.iter().zip(&rule.log_weights) {
            let u = mode + SQRT_2 * scale * x;
            let l = lw + x * x + log_jac + self.integrand(st, i, u).0;
            self.check_node(i, *x, u, l)?;
            us.push(u);
            logw.push(l);
        }
        Ok((us, logw))
    }

    /// Gamma mixing in `eta = log theta`. As `eta -> -inf` the log integrand
    /// is linear with slope `r + S`, a tail Gauss–Hermite handles poorly when
    /// `r + S` is small. Nodes are therefore placed at
    /// `eta = mode + scale psi(u)` with `psi(u) = u - kappa u^2 / (1 + e^u)`,
    /// which leaves the mode region and right tail alone and bends the left
    /// tail into a Gaussian of unit variance in `u`.
    fn gamma_nodes(&self, st: &State, i: usize, rule: &GaussHermite, mode: f64, curv: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let scale = (-1.0 / curv).sqrt();
        let slope = 1.0 / (st.s * st.s) + self.panel.policy(i).total_count() as f64;
        let kappa = (0.5 / (slope * scale)).min(KAPPA_MAX);
        let mut us = Vec::with_capacity(rule.len());
        let mut logw = Vec::with_capacity(rule.len());
        for (x, lw) in rule.nodes.iter().zip(&rule.log_weights) {
            let u = SQRT_2 * x;
            let (psi, dpsi) = tail_map(u, kappa);
            let eta = mode + scale * psi;
            let l = lw + x * x + (SQRT_2 * scale * dpsi).ln() + self.integrand(st, i, eta).0;
            self.check_node(i, *x, eta, l)?;
            us.push(eta);
            logw.push(l);
        }
        Ok((us, logw))
    }

    fn check_node(&self, i: usize, x: f64, u: f64, l: f64) -> Result<()> {
        if l.is_nan() || l == f64::INFINITY {
            return Err(Error::numerical(format!(
                "non-finite quadrature weight for policy `{}` at node {x} (integration variable {u})",
                self.panel.policy(i).id()
            )));
        }
        Ok(())
    }

    /// Posterior mode of the (strictly concave) log integrand and the curvature there.
    fn find_mode(&self, st: &State, i: usize) -> Result<(f64, f64)> {
        let mut u = 0.0;
        let (mut g, mut g1, mut g2) = self.integrand(st, i, u);
        for _ in 0..200 {
            if !(g2 < 0.0) || !g.is_finite() {
                break;
            }
            let step = (-g1 / g2).clamp(-20.0, 20.0);
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let un = u + t * step;
                let (gn, g1n, g2n) = self.integrand(st, i, un);
                if gn.is_finite() && gn >= g - 1e-14 * g.abs() {
                    u = un;
                    (g, g1, g2) = (gn, g1n, g2n);
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved || (t * step).abs() <= 1e-11 * (1.0 + u.abs()) {
                break;
            }
        }
        if !(g2 < 0.0 && g.is_finite()) {
            return Err(Error::numerical(format!(
                "posterior mode search failed for policy `{}` (u={u}, curvature={g2})",
                self.panel.policy(i).id()
            )));
        }
        Ok((u, g2))
    }
}

/// Log density of `eta = log theta` for `theta ~ Gamma(r, r)`:
/// `r ln r - lnΓ(r) + r eta - r e^eta`, written so the large-`r` terms cancel analytically.
fn gamma_log_density(r: f64, eta: f64) -> f64 {
    0.5 * r.ln() - HALF_LN_2PI - stirling_tail(r) - r * expm1_minus_x(eta)
}

/// First and second `s`-derivatives of [`gamma_log_density`] with `r = s^-2`.
fn gamma_log_density_s_derivs(s: f64, eta: f64) -> (f64, f64) {
    let r = 1.0 / (s * s);
    // d/dr = ln r - psi(r) - (e^eta - 1 - eta), d2/dr2 = 1/r - psi'(r)
    let dr = log_minus_digamma(r) - expm1_minus_x(eta);
    let drr = -trigamma_minus_inv(r);
    let s2 = s * s;
    let r_s = -2.0 / (s2 * s);
    let r_ss = 6.0 / (s2 * s2);
    (dr * r_s, drr * r_s * r_s + dr * r_ss)
}

/// Keeps `psi' >= 1 - 0.36 kappa` positive.
const KAPPA_MAX: f64 = 2.0;

/// `psi(u) = u - kappa u^2 / (1 + e^u)` and its derivative.
fn tail_map(u: f64, kappa: f64) -> (f64, f64) {
    // 1 / (1 + e^u) written to stay finite for large |u|
    let sig = if u > 0.0 {
        let e = (-u).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + u.exp())
    };
    let psi = u - kappa * u * u * sig;
    let dpsi = 1.0 - kappa * (2.0 * u * sig - u * u * sig * (1.0 - sig));
    (psi, dpsi)
}

fn symmetrize_lower(h: &mut DMatrix<f64>) {
    let d = h.nrows();
    for j in 0..d {
        for k in (j + 1)..d {
            h[(j, k)] = h[(k, j)];
        }
    }
}

impl Objective for Model<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.total(x, false)?.0)
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        self.total(x, true)
    }
}

fn check_params(panel: &ClaimPanel, conditional: Conditional, beta: &[f64], alpha: f64, sigma2: f64) -> Result<()> {
    if beta.len() != panel.n_covariates() {
        return Err(Error::domain(format!(
            "beta has length {}, panel has {} covariates",
            beta.len(),
            panel.n_covariates()
        )));
    }
    if !(sigma2.is_finite() && sigma2 >= 0.0) {
        return Err(Error::domain(format!("sigma2 must be finite and >= 0, got {sigma2}")));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::domain(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if conditional == Conditional::Poisson && alpha != 0.0 {
        return Err(Error::domain("alpha must be 0 for the Poisson conditional"));
    }
    Ok(())
}

fn pack(conditional: Conditional, beta: &[f64], alpha: f64, sigma2: f64) -> Vec<f64> {
    let mut x = beta.to_vec();
    if conditional == Conditional::Negbin {
        x.push(alpha.sqrt());
    }
    x.push(sigma2.sqrt());
    x
}

/// `sum_i log ∫ prod_t f(N_it | theta lambda_it) dG(theta)`.
pub fn marginal_loglik(
    panel: &ClaimPanel,
    conditional: Conditional,
    re_dist: MixingKind,
    beta: &[f64],
    alpha: f64,
    sigma2: f64,
) -> Result<f64> {
    marginal_loglik_with(panel, conditional, re_dist, beta, alpha, sigma2, &ReConfig::default())
}

pub fn marginal_loglik_with(
    panel: &ClaimPanel,
    conditional: Conditional,
    re_dist: MixingKind,
    beta: &[f64],
    alpha: f64,
    sigma2: f64,
    config: &ReConfig,
) -> Result<f64> {
    check_params(panel, conditional, beta, alpha, sigma2)?;
    if sigma2 == 0.0 {
        return Ok(conditional_loglik(panel, beta, snap(alpha)));
    }
    let model = Model::new(panel, conditional, re_dist, config)?;
    model.value(&pack(conditional, beta, alpha, sigma2))
}

fn conditional_loglik(panel: &ClaimPanel, beta: &[f64], alpha: f64) -> f64 {
    panel
        .counts()
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let mu = dot(panel.covariates(c), beta).exp();
            nb_log_pmf_with(n as f64, mu, alpha, ln_rising_scaled(alpha, n), ln_factorial(n))
        })
        .sum()
}

/// Marginal log-likelihood and its analytic gradient in `(beta, alpha, sigma2)`
/// (`alpha` omitted for the Poisson conditional). At `alpha = 0` or
/// `sigma2 = 0` the corresponding entry is the right derivative.
pub fn marginal_loglik_gradient(
    panel: &ClaimPanel,
    conditional: Conditional,
    re_dist: MixingKind,
    beta: &[f64],
    alpha: f64,
    sigma2: f64,
    config: &ReConfig,
) -> Result<(f64, Vec<f64>)> {
    check_params(panel, conditional, beta, alpha, sigma2)?;
    let model = Model::new(panel, conditional, re_dist, config)?;
    let x = pack(conditional, beta, alpha, sigma2);
    let (value, g, h) = model.eval(&x)?;
    let p = beta.len();
    let mut out: Vec<f64> = g.iter().take(p).copied().collect();
    // d/dv = (d/ds) / (2s), or half the curvature in s at s = 0
    let natural = |idx: usize, root: f64| {
        if root > 0.0 {
            g[idx] / (2.0 * root)
        } else {
            0.5 * h[(idx, idx)]
        }
    };
    if conditional == Conditional::Negbin {
        out.push(natural(p, x[p]));
    }
    let last = x.len() - 1;
    out.push(natural(last, x[last]));
    Ok((value, out))
}

/// Maximum-likelihood fit of the shared random-effect model.
pub fn fit_shared_re(panel: &ClaimPanel, conditional: Conditional, re_dist: MixingKind) -> Result<ReFit> {
    fit_shared_re_with(panel, conditional, re_dist, &ReConfig::default())
}

pub fn fit_shared_re_with(
    panel: &ClaimPanel,
    conditional: Conditional,
    re_dist: MixingKind,
    config: &ReConfig,
) -> Result<ReFit> {
    let base: GlmFit = match conditional {
        Conditional::Poisson => fit_poisson_glm(panel)?,
        Conditional::Negbin => fit_nb_glm(panel)?,
    };
    let model = Model::new(panel, conditional, re_dist, config)?;
    let nodes = model.rule.as_ref().map_or(0, |r| r.len());
    if panel.total_count() == 0 {
        return Ok(ReFit {
            conditional,
            re_dist,
            covariate_names: panel.covariate_names().to_vec(),
            beta: base.beta,
            alpha: 0.0,
            sigma2: 0.0,
            var_theta: 0.0,
            loglik: base.loglik,
            iterations: 0,
            converged: false,
            status: base.status,
            quadrature_nodes: nodes,
        });
    }

    let v0 = moment_start(panel, &base).clamp(0.01, 4.0);
    let sigma2_0 = match re_dist {
        MixingKind::LognormalMeanOne => v0.ln_1p(),
        _ => v0,
    };
    let alpha0 = if conditional == Conditional::Negbin { base.alpha.max(0.01) } else { 0.0 };
    let start = pack(conditional, &base.beta, alpha0, sigma2_0);
    let opts = NewtonOptions {
        max_iter: config.max_iter,
        ..NewtonOptions::default()
    };
    let mut r = maximize(&model, &start, opts)?;

    // The sigma2 = 0 submodel is the GLM; never report less than it.
    let boundary_ll = base.loglik;
    if base.converged && r.value < boundary_ll - 1e-9 * (1.0 + boundary_ll.abs()) {
        let from_boundary = pack(conditional, &base.beta, base.alpha, 0.0);
        let rb = maximize(&model, &from_boundary, opts)?;
        if rb.value > r.value {
            r = rb;
        }
    }

    let p = panel.n_covariates();
    let beta = r.x[..p].to_vec();
    let alpha = if conditional == Conditional::Negbin { snap(r.x[p] * r.x[p]) } else { 0.0 };
    let s = r.x[r.x.len() - 1];
    let sigma2 = snap(s * s);
    let mut status = r.status.clone();
    if r.converged && sigma2 == 0.0 {
        status = "converged; sigma2 at the boundary".into();
    }
    Ok(ReFit {
        conditional,
        re_dist,
        covariate_names: panel.covariate_names().to_vec(),
        beta,
        alpha,
        sigma2,
        var_theta: var_theta(re_dist, sigma2),
        loglik: r.value,
        iterations: r.iterations,
        converged: r.converged,
        status,
        quadrature_nodes: nodes,
    })
}

/// Moment estimate of `Var(theta)` from the null fit:
/// `sum_i [ (sum_t r_t)^2 - sum_t E r_t^2 ] / sum_i [ (sum_t lam_t)^2 - sum_t lam_t^2 ]`
/// with `r = N - lam` and `E r^2 = lam (1 + alpha lam)`, i.e. the cross-period
/// covariance divided by its value per unit variance.
fn moment_start(panel: &ClaimPanel, base: &GlmFit) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for pol in panel.policies() {
        let (mut rs, mut vs, mut ls, mut l2) = (0.0, 0.0, 0.0, 0.0);
        for (t, &n) in pol.counts().iter().enumerate() {
            let l = dot(pol.covariates(t), &base.beta).exp();
            rs += n as f64 - l;
            vs += l * (1.0 + base.alpha * l);
            ls += l;
            l2 += l * l;
        }
        num += rs * rs - vs;
        den += ls * ls - l2;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::NbParams;
    use crate::panel::parse_panel_csv;

    fn toy() -> ClaimPanel {
        parse_panel_csv(
            "policy_id,period,count,one,x\n\
             A,1,0,1,0.2\nA,2,2,1,0.5\nA,3,1,1,0.1\n\
             B,1,4,1,0.9\nB,2,3,1,1.1\n\
             C,1,0,1,-0.3\nC,2,0,1,0.0\nC,3,0,1,0.4\n\
             D,1,7,1,1.5\n\
             E,1,1,1,0.3\nE,2,0,1,0.3\nE,3,2,1,0.6\n",
        )
        .unwrap()
    }

    #[test]
    fn zero_variance_is_conditional_loglik() {
        let panel = toy();
        let beta = [0.1, 0.4];
        let want: f64 = (0..panel.n_cells())
            .map(|c| {
                let mu = dot(panel.covariates(c), &beta).exp();
                NbParams::new(mu, 0.3).unwrap().log_pmf(panel.counts()[c])
            })
            .sum();
        let got = marginal_loglik(&panel, Conditional::Negbin, MixingKind::LognormalMeanOne, &beta, 0.3, 0.0).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn single_cell_poisson_gamma_is_nb() {
        let panel = parse_panel_csv("policy_id,period,count,one\nA,1,3,1\n").unwrap();
        let beta = [0.7f64];
        let v = 0.45;
        let want = NbParams::new(beta[0].exp(), v).unwrap().log_pmf(3);
        let got = marginal_loglik(&panel, Conditional::Poisson, MixingKind::GammaMeanOne, &beta, 0.0, v).unwrap();
        assert!((got - want).abs() < 1e-13);
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let panel = toy();
        let beta = [0.1, 0.4];
        for &v in &[1e-6, 0.05, 0.4, 1.0] {
            let closed = marginal_loglik(&panel, Conditional::Poisson, MixingKind::GammaMeanOne, &beta, 0.0, v).unwrap();
            let cfg = ReConfig {
                nodes: 64,
                force_quadrature: true,
                ..ReConfig::default()
            };
            let quad =
                marginal_loglik_with(&panel, Conditional::Poisson, MixingKind::GammaMeanOne, &beta, 0.0, v, &cfg).unwrap();
            assert!((closed - quad).abs() < 1e-8, "v={v}: {closed} vs {quad}");
        }
    }

    fn check_gradient(cond: Conditional, kind: MixingKind, force: bool, alpha: f64, sigma2: f64) {
        let panel = toy();
        let beta = [0.1, 0.4];
        let cfg = ReConfig {
            force_quadrature: force,
            ..ReConfig::default()
        };
        let (_, g) = marginal_loglik_gradient(&panel, cond, kind, &beta, alpha, sigma2, &cfg).unwrap();
        let f = |b: [f64; 2], a: f64, s2: f64| marginal_loglik_with(&panel, cond, kind, &b, a, s2, &cfg).unwrap();
        let h = 1e-5;
        let mut fd = vec![
            (f([beta[0] + h, beta[1]], alpha, sigma2) - f([beta[0] - h, beta[1]], alpha, sigma2)) / (2.0 * h),
            (f([beta[0], beta[1] + h], alpha, sigma2) - f([beta[0], beta[1] - h], alpha, sigma2)) / (2.0 * h),
        ];
        if cond == Conditional::Negbin {
            fd.push((f(beta, alpha + h, sigma2) - f(beta, alpha - h, sigma2)) / (2.0 * h));
        }
        fd.push((f(beta, alpha, sigma2 + h) - f(beta, alpha, sigma2 - h)) / (2.0 * h));
        for (k, (a, b)) in g.iter().zip(&fd).enumerate() {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{cond:?} {kind:?} k={k}: {a} vs {b}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradient(Conditional::Poisson, MixingKind::GammaMeanOne, false, 0.0, 0.3);
        check_gradient(Conditional::Poisson, MixingKind::GammaMeanOne, true, 0.0, 0.3);
        check_gradient(Conditional::Poisson, MixingKind::LognormalMeanOne, false, 0.0, 0.3);
        check_gradient(Conditional::Negbin, MixingKind::LognormalMeanOne, false, 0.4, 0.25);
        check_gradient(Conditional::Negbin, MixingKind::GammaMeanOne, false, 0.4, 0.25);
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let panel = toy();
        for &(cond, kind, x) in &[
            (Conditional::Negbin, MixingKind::LognormalMeanOne, [0.1, 0.4, 0.6, 0.5]),
            (Conditional::Negbin, MixingKind::GammaMeanOne, [0.1, 0.4, 0.6, 0.5]),
            (Conditional::Poisson, MixingKind::GammaMeanOne, [0.1, 0.4, 0.5, 0.0]),
        ] {
            let model = Model::new(&panel, cond, kind, &ReConfig::default()).unwrap();
            let x: Vec<f64> = x[..model.dim()].to_vec();
            let (_, _, h) = model.eval(&x).unwrap();
            let eps = 1e-6;
            for k in 0..x.len() {
                let mut up = x.clone();
                let mut dn = x.clone();
                up[k] += eps;
                dn[k] -= eps;
                let gu = model.eval(&up).unwrap().1;
                let gd = model.eval(&dn).unwrap().1;
                for j in 0..x.len() {
                    let fd = (gu[j] - gd[j]) / (2.0 * eps);
                    assert!((h[(j, k)] - fd).abs() < 1e-5 * (1.0 + fd.abs()), "{kind:?} ({j},{k}): {} vs {fd}", h[(j, k)]);
                }
            }
        }
    }

    #[test]
    fn node_doubling_is_stable() {
        let panel = toy();
        let beta = [0.1, 0.4];
        for kind in [MixingKind::LognormalMeanOne, MixingKind::GammaMeanOne] {
            let at = |nodes| {
                let cfg = ReConfig {
                    nodes,
                    ..ReConfig::default()
                };
                marginal_loglik_with(&panel, Conditional::Negbin, kind, &beta, 0.3, 0.5, &cfg).unwrap()
            };
            assert!((at(32) - at(64)).abs() < 1e-7);
        }
    }

    #[test]
    fn fit_dominates_glm() {
        let panel = toy();
        let glm = fit_poisson_glm(&panel).unwrap();
        let fit = fit_shared_re(&panel, Conditional::Poisson, MixingKind::LognormalMeanOne).unwrap();
        assert!(fit.converged, "{}", fit.status);
        assert!(fit.loglik >= glm.loglik - 1e-9);
        assert!((fit.var_theta - fit.sigma2.exp_m1()).abs() < 1e-15);
        let nb = fit_shared_re(&panel, Conditional::Negbin, MixingKind::LognormalMeanOne).unwrap();
        assert!(nb.converged, "{}", nb.status);
        assert!(nb.loglik >= fit.loglik - 1e-7);
    }
}
