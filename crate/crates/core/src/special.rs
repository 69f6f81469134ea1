//! Special functions used by the likelihood kernels.
//!
//! Most of these exist to evaluate negative binomial quantities in the
//! small-dispersion regime, where the textbook forms cancel catastrophically.

use statrs::function::{erf, gamma};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Switch point for the Stirling-based branches.
const ASYMPTOTIC_MIN: f64 = 20.0;

pub fn ln_gamma(x: f64) -> f64 {
    gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    gamma::digamma(x)
}

/// `ln n!`.
pub fn ln_factorial(n: u64) -> f64 {
    if n < 2 {
        0.0
    } else {
        ln_gamma(n as f64 + 1.0)
    }
}

/// `lnΓ(x) - [(x - 1/2) ln x - x + ln(2π)/2]`.
pub fn stirling_tail(x: f64) -> f64 {
    if x >= ASYMPTOTIC_MIN {
        let inv = 1.0 / x;
        let inv2 = inv * inv;
        inv * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0 - inv2 * 691.0 / 360_360.0)))))
    } else {
        ln_gamma(x) - ((x - 0.5) * x.ln() - x + HALF_LN_2PI)
    }
}

/// `ln(1 + x) - x`, accurate near zero.
pub fn log1p_minus_x(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        // -x^2/2 + x^3/3 - ... - x^10/10
        let mut term = x * x;
        let mut sum = 0.0;
        for k in 2..=10 {
            let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
            sum += sign * term / k as f64;
            term *= x;
        }
        sum
    } else {
        x.ln_1p() - x
    }
}

/// `e^x - 1 - x`, accurate near zero.
pub fn expm1_minus_x(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        let mut term = x * x / 2.0;
        let mut sum = 0.0;
        for k in 3..=11 {
            sum += term;
            term *= x / k as f64;
        }
        sum
    } else {
        x.exp_m1() - x
    }
}

/// `ln(1 + x) / x` with the removable singularity at zero filled in.
pub fn log1p_over_x(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * (0.5 - x * (1.0 / 3.0 - x * (0.25 - x / 5.0)))
    } else {
        x.ln_1p() / x
    }
}

/// `[ln(1 + x) - x/(1 + x)] / x^2`; equals 1/2 at zero.
///
/// The negative binomial alpha-score contains `mu^2 * nb_phi(alpha * mu)`, which is
/// how it stays finite as alpha goes to zero.
pub fn nb_phi(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        // sum_{k>=2} (-1)^k (k-1)/k x^(k-2)
        let mut sum = 0.0;
        let mut pow = 1.0;
        for k in 2..=14 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * (k - 1) as f64 / k as f64 * pow;
            pow *= x;
        }
        sum
    } else {
        (x.ln_1p() - x / (1.0 + x)) / (x * x)
    }
}

/// Derivative of [`nb_phi`]; equals -2/3 at zero.
pub fn nb_phi_prime(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        // sum_{k>=3} (-1)^k (k-1)(k-2)/k x^(k-3)
        let mut sum = 0.0;
        let mut pow = 1.0;
        for k in 3..=15 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * ((k - 1) * (k - 2)) as f64 / k as f64 * pow;
            pow *= x;
        }
        sum
    } else {
        let opx = 1.0 + x;
        (x * x / (opx * opx) - 2.0 * (x.ln_1p() - x / opx)) / (x * x * x)
    }
}

/// `sum_{j<n} ln(1 + alpha j) = lnΓ(n + 1/alpha) - lnΓ(1/alpha) + n ln alpha`.
///
/// This is the only place the negative binomial normalising constant is
/// evaluated. It always goes through log-gamma; for large `1/alpha` the
/// log-gamma difference is taken through its Stirling expansion so that the
/// two large terms cancel analytically rather than in floating point.
pub fn ln_rising_scaled(alpha: f64, n: u64) -> f64 {
    if n == 0 || alpha == 0.0 {
        return 0.0;
    }
    let nf = n as f64;
    let r = 1.0 / alpha;
    if r >= ASYMPTOTIC_MIN {
        let x = nf * alpha;
        r * log1p_minus_x(x) + (nf - 0.5) * x.ln_1p() + stirling_tail(r + nf) - stirling_tail(r)
    } else {
        ln_gamma(nf + r) - ln_gamma(r) + nf * alpha.ln()
    }
}

/// `ln r - ψ(r)`.
pub fn log_minus_digamma(r: f64) -> f64 {
    if r >= ASYMPTOTIC_MIN {
        let inv = 1.0 / r;
        let inv2 = inv * inv;
        0.5 * inv
            + inv2
                * (1.0 / 12.0
                    - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))))
    } else {
        r.ln() - digamma(r)
    }
}

/// `ψ'(r) - 1/r`.
pub fn trigamma_minus_inv(r: f64) -> f64 {
    if r >= ASYMPTOTIC_MIN {
        trigamma_asymptotic_tail(r)
    } else {
        trigamma(r) - 1.0 / r
    }
}

pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_MIN {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    acc + 1.0 / x + trigamma_asymptotic_tail(x)
}

fn trigamma_asymptotic_tail(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    inv2 * (0.5
        + inv
            * (1.0 / 6.0
                - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0)))))
}

/// Standard normal upper tail `1 - Φ(z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erf::erfc(z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile `Φ⁻¹(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf::erf_inv(2.0 * p - 1.0)
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// `ln sum_i exp(v_i)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn rising_matches_direct_product() {
        for &alpha in &[1e-9, 1e-4, 0.01, 0.049, 0.051, 0.3, 1.0, 4.0] {
            for &n in &[1u64, 2, 5, 17, 60, 300] {
                let direct: f64 = (0..n).map(|j| (alpha * j as f64).ln_1p()).sum();
                let got = ln_rising_scaled(alpha, n);
                assert!(close(got, direct, 1e-12), "alpha={alpha} n={n}: {got} vs {direct}");
            }
        }
    }

    #[test]
    fn phi_series_and_closed_form_agree_at_switch() {
        for &x in &[0.009_999, 0.010_001, -0.009_999] {
            let closed = (f64::ln_1p(x) - x / (1.0 + x)) / (x * x);
            assert!(close(nb_phi(x), closed, 1e-12));
        }
        assert_eq!(nb_phi(0.0), 0.5);
        assert!(close(nb_phi_prime(0.0), -2.0 / 3.0, 1e-15));
        // central difference of nb_phi
        for &x in &[0.003, 0.2, 3.0] {
            let h = 1e-6;
            let fd = (nb_phi(x + h) - nb_phi(x - h)) / (2.0 * h);
            assert!(close(nb_phi_prime(x), fd, 1e-7), "x={x}");
        }
    }

    #[test]
    fn digamma_family() {
        for &r in &[0.5, 3.0, 19.9, 20.1, 250.0, 1e6] {
            let h = 1e-5 * r;
            let fd = (digamma(r + h) - digamma(r - h)) / (2.0 * h);
            assert!(close(trigamma(r), fd, 1e-6), "r={r}");
            assert!(close(log_minus_digamma(r), r.ln() - digamma(r), 1e-9));
        }
        assert!(close(trigamma(1.0), std::f64::consts::PI.powi(2) / 6.0, 1e-13));
    }

    #[test]
    fn stirling_tail_continuity() {
        let x = 20.0f64;
        let direct = ln_gamma(x) - ((x - 0.5) * x.ln() - x + HALF_LN_2PI);
        assert!((stirling_tail(x) - direct).abs() < 1e-13);
    }

    #[test]
    fn normal_helpers() {
        assert!(close(normal_sf(0.0), 0.5, 1e-15));
        assert!(close(normal_quantile(0.95), 1.644_853_626_951_472_2, 1e-12));
        assert!(close(normal_sf(1.644_853_626_951_472_2), 0.05, 1e-10));
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let s: CompensatedSum = [1e16, 1.0, -1e16, 1.0].into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }
}
