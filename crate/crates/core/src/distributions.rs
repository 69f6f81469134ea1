//! Count distributions and mean-one mixing laws.
//!
//! The negative binomial is parameterised by its mean `lambda` and dispersion
//! `alpha`, so that `Var N = lambda + alpha * lambda^2`. `alpha = 0` is the Poisson
//! law and is evaluated on the Poisson branch, not as a limit.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_factorial, ln_rising_scaled, log1p_over_x, nb_phi, nb_phi_prime};

/// Dispersions below this are treated as exactly Poisson.
pub const POISSON_ALPHA: f64 = 1e-12;

/// Negative binomial `NB(lambda, alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbParams {
    lambda: f64,
    alpha: f64,
}

impl NbParams {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::domain(format!("lambda must be finite and > 0, got {lambda}")));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::domain(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        let alpha = if alpha < POISSON_ALPHA { 0.0 } else { alpha };
        Ok(Self { lambda, alpha })
    }

    pub fn poisson(lambda: f64) -> Result<Self> {
        Self::new(lambda, 0.0)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_poisson(&self) -> bool {
        self.alpha == 0.0
    }

    pub fn mean(&self) -> f64 {
        self.lambda
    }

    pub fn variance(&self) -> f64 {
        self.lambda * (1.0 + self.alpha * self.lambda)
    }

    pub fn log_pmf(&self, n: u64) -> f64 {
        nb_log_pmf_with(n as f64, self.lambda, self.alpha, ln_rising_scaled(self.alpha, n), ln_factorial(n))
    }

    pub fn pmf(&self, n: u64) -> f64 {
        self.log_pmf(n).exp()
    }

    /// Central moment of order 2, 3 or 4.
    pub fn central_moment(&self, order: u32) -> Result<f64> {
        let (l, a) = (self.lambda, self.alpha);
        let m2 = l * (1.0 + a * l);
        match order {
            2 => Ok(m2),
            3 => Ok(m2 * (1.0 + 2.0 * a * l)),
            4 => Ok(m2 * (1.0 + 3.0 * l + 6.0 * a * l + 3.0 * a * l * l + 6.0 * a * a * l * l)),
            _ => Err(Error::domain(format!("central moment order must be 2, 3 or 4, got {order}"))),
        }
    }

    /// Draw through the gamma-Poisson mixture: `theta ~ Gamma(1/alpha, 1/alpha)`, then
    /// `Poisson(lambda * theta)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.is_poisson() {
            return sample_poisson(self.lambda, rng);
        }
        let theta = sample_gamma_mean_one(self.alpha, rng);
        sample_poisson(self.lambda * theta, rng)
    }

    /// Probabilities `p(0), p(1), ...` by forward recursion until the upper tail
    /// mass drops below `tail_tol`. Returns the pmf values and the remaining tail.
    pub fn pmf_table(&self, tail_tol: f64, max_terms: usize) -> Result<(Vec<f64>, f64)> {
        let (l, a) = (self.lambda, self.alpha);
        let mut p = if a == 0.0 { (-l).exp() } else { (-(1.0 / a) * (a * l).ln_1p()).exp() };
        if p == 0.0 {
            return Err(Error::numerical(format!(
                "pmf at zero underflows for lambda={l}, alpha={a}; recursion cannot start"
            )));
        }
        let ratio = if a == 0.0 { l } else { l / (1.0 + a * l) };
        let mut table = Vec::new();
        let mut cdf = crate::special::CompensatedSum::new();
        for n in 0..max_terms {
            table.push(p);
            cdf.add(p);
            let tail = 1.0 - cdf.value();
            if tail < tail_tol && (n as f64) >= l {
                return Ok((table, tail.max(0.0)));
            }
            let nf = n as f64;
            p *= ratio * (1.0 + a * nf) / (nf + 1.0);
        }
        Err(Error::numerical(format!(
            "pmf tail did not fall below {tail_tol} within {max_terms} terms (lambda={l}, alpha={a})"
        )))
    }
}

/// `log P(N = n)` for `N ~ NB(p.lambda, p.alpha)`.
pub fn log_pmf(n: u64, p: &NbParams) -> f64 {
    p.log_pmf(n)
}

/// Central moment `E(N - lambda)^order` for order in {2, 3, 4}.
pub fn nb_central_moment(p: &NbParams, order: u32) -> Result<f64> {
    p.central_moment(order)
}

pub fn poisson_log_pmf(n: u64, lambda: f64) -> f64 {
    nb_log_pmf_with(n as f64, lambda, 0.0, 0.0, ln_factorial(n))
}

/// Log-pmf with the `n`-only constants supplied by the caller.
///
/// `ln_rise = ln_rising_scaled(alpha, n)` and `ln_fact = ln n!`.
#[inline]
pub(crate) fn nb_log_pmf_with(n: f64, mu: f64, alpha: f64, ln_rise: f64, ln_fact: f64) -> f64 {
    let n_ln_mu = if n == 0.0 { 0.0 } else { n * mu.ln() };
    if alpha == 0.0 {
        n_ln_mu - mu - ln_fact
    } else {
        let x = alpha * mu;
        ln_rise + n_ln_mu - ln_fact - n * x.ln_1p() - mu * log1p_over_x(x)
    }
}

/// First and second derivatives of the NB log-pmf in `xi = ln mu` and `alpha`.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct NbDerivs {
    pub d_xi: f64,
    pub d_xixi: f64,
    pub d_a: f64,
    pub d_xia: f64,
    pub d_aa: f64,
}

/// `a_sum = sum_{j<n} j/(1+alpha j)`, `b_sum = sum_{j<n} j^2/(1+alpha j)^2`.
pub(crate) fn nb_alpha_sums(alpha: f64, n: u64) -> (f64, f64) {
    let mut a_sum = 0.0;
    let mut b_sum = 0.0;
    for j in 1..n {
        let jf = j as f64;
        let t = jf / (1.0 + alpha * jf);
        a_sum += t;
        b_sum += t * t;
    }
    (a_sum, b_sum)
}

/// Derivatives at `(n, mu, alpha)`. Valid at `alpha = 0`, where the alpha
/// derivatives are the right limits.
#[inline]
pub(crate) fn nb_derivs(n: f64, mu: f64, alpha: f64, a_sum: f64, b_sum: f64) -> NbDerivs {
    let x = alpha * mu;
    let opx = 1.0 + x;
    let resid = n - mu;
    NbDerivs {
        d_xi: resid / opx,
        d_xixi: -mu * (1.0 + alpha * n) / (opx * opx),
        d_a: a_sum + mu * mu * nb_phi(x) - n * mu / opx,
        d_xia: -mu * resid / (opx * opx),
        d_aa: -b_sum + mu * mu * mu * nb_phi_prime(x) + n * mu * mu / (opx * opx),
    }
}

pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let d = Poisson::new(lambda).expect("poisson rate is positive and finite");
    let x: f64 = d.sample(rng);
    x as u64
}

fn sample_gamma_mean_one<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> f64 {
    let shape = 1.0 / variance;
    Gamma::new(shape, variance)
        .expect("gamma shape and scale are positive")
        .sample(rng)
}

/// Family of a mean-one mixing distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingKind {
    DegenerateOne,
    GammaMeanOne,
    LognormalMeanOne,
}

/// A mean-one multiplicative random effect.
///
/// `param` is `Var(theta)` for the gamma kind and the log-scale variance
/// `sigma^2` of `Lognormal(-sigma^2/2, sigma^2)` for the lognormal kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingDist {
    kind: MixingKind,
    param: f64,
}

impl MixingDist {
    pub fn new(kind: MixingKind, param: f64) -> Result<Self> {
        if !(param.is_finite() && param >= 0.0) {
            return Err(Error::domain(format!("mixing variance must be finite and >= 0, got {param}")));
        }
        let kind = if param == 0.0 { MixingKind::DegenerateOne } else { kind };
        if kind == MixingKind::DegenerateOne {
            return Ok(Self::degenerate());
        }
        Ok(Self { kind, param })
    }

    pub fn degenerate() -> Self {
        Self {
            kind: MixingKind::DegenerateOne,
            param: 0.0,
        }
    }

    pub fn gamma(variance: f64) -> Result<Self> {
        Self::new(MixingKind::GammaMeanOne, variance)
    }

    pub fn lognormal(sigma2: f64) -> Result<Self> {
        Self::new(MixingKind::LognormalMeanOne, sigma2)
    }

    pub fn kind(&self) -> MixingKind {
        self.kind
    }

    /// The distribution's own variance parameter (see type docs).
    pub fn variance_parameter(&self) -> f64 {
        self.param
    }

    /// `Var(theta)`.
    pub fn theta_variance(&self) -> f64 {
        match self.kind {
            MixingKind::DegenerateOne => 0.0,
            MixingKind::GammaMeanOne => self.param,
            MixingKind::LognormalMeanOne => self.param.exp_m1(),
        }
    }

    /// `E(theta^2)`.
    pub fn second_moment(&self) -> f64 {
        1.0 + self.theta_variance()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            MixingKind::DegenerateOne => 1.0,
            MixingKind::GammaMeanOne => sample_gamma_mean_one(self.param, rng),
            MixingKind::LognormalMeanOne => {
                let z: f64 = StandardNormal.sample(rng);
                let s = self.param.sqrt();
                (-0.5 * self.param + s * z).exp()
            }
        }
    }
}
