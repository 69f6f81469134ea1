//! Gauss–Hermite rules for `∫ f(x) e^{-x^2} dx`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Nodes in increasing order with log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl GaussHermite {
    /// `n`-point rule. Roots of the Jacobi matrix seed a Newton polish on the
    /// orthonormal Hermite recurrence, whose derivative then gives the weights
    /// to full relative accuracy even far in the tails.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > 400 {
            return Err(Error::domain(format!("Gauss-Hermite order must be in 1..=400, got {n}")));
        }
        let mut jac = DMatrix::zeros(n, n);
        for k in 1..n {
            let off = (k as f64 / 2.0).sqrt();
            jac[(k - 1, k)] = off;
            jac[(k, k - 1)] = off;
        }
        let mut seeds: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
        seeds.sort_by(f64::total_cmp);
        let pim4 = PI.powf(-0.25);
        let mut nodes = Vec::with_capacity(n);
        let mut log_weights = Vec::with_capacity(n);
        for (i, &seed) in seeds.iter().enumerate() {
            // symmetric pairs share one root; the odd middle root is exactly zero
            if n % 2 == 1 && i == n / 2 {
                let (_, dp) = hermite_orthonormal(n, 0.0, pim4);
                nodes.push(0.0);
                log_weights.push((2.0f64).ln() - 2.0 * dp.abs().ln());
                continue;
            }
            if i >= n / 2 {
                let mirror = n - 1 - i;
                nodes.push(-nodes[mirror]);
                log_weights.push(log_weights[mirror]);
                continue;
            }
            let mut z = seed;
            let mut converged = false;
            for _ in 0..100 {
                let (p, dp) = hermite_orthonormal(n, z, pim4);
                let z1 = z - p / dp;
                let done = (z1 - z).abs() <= 1e-15 * z1.abs().max(1.0);
                z = z1;
                if done {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::numerical(format!("Gauss-Hermite root {i} of order {n} did not converge")));
            }
            let (_, dp) = hermite_orthonormal(n, z, pim4);
            nodes.push(z);
            log_weights.push((2.0f64).ln() - 2.0 * dp.abs().ln());
        }
        Ok(Self { nodes, log_weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Orthonormal Hermite polynomial of degree `n` at `z` and its derivative.
fn hermite_orthonormal(n: usize, z: f64, pim4: f64) -> (f64, f64) {
    let mut p1 = pim4;
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    let dp = (2.0 * n as f64).sqrt() * p2;
    (p1, dp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(rule: &GaussHermite, f: impl Fn(f64) -> f64) -> f64 {
        rule.nodes
            .iter()
            .zip(&rule.log_weights)
            .map(|(x, lw)| lw.exp() * f(*x))
            .sum()
    }

    #[test]
    fn moments_are_exact() {
        for &n in &[1usize, 2, 5, 20, 32, 64, 128, 200, 400] {
            let rule = GaussHermite::new(n).unwrap();
            assert_eq!(rule.len(), n);
            let sqrt_pi = PI.sqrt();
            assert!((integrate(&rule, |_| 1.0) - sqrt_pi).abs() < 1e-13, "n={n}");
            if n >= 2 {
                assert!((integrate(&rule, |x| x * x) - sqrt_pi / 2.0).abs() < 1e-13, "n={n}");
                assert!(integrate(&rule, |x| x).abs() < 1e-13);
            }
            if n >= 3 {
                assert!((integrate(&rule, |x| x.powi(4)) - 0.75 * sqrt_pi).abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn known_three_point_rule() {
        let rule = GaussHermite::new(3).unwrap();
        let r = (1.5f64).sqrt();
        assert!((rule.nodes[2] - r).abs() < 1e-14);
        assert_eq!(rule.nodes[1], 0.0);
        assert!((rule.log_weights[1].exp() - 2.0 * PI.sqrt() / 3.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_expectation_of_exp() {
        // E[e^{sZ}] = e^{s^2/2}
        let rule = GaussHermite::new(32).unwrap();
        let s = 1.3;
        let got = integrate(&rule, |x| (s * std::f64::consts::SQRT_2 * x).exp()) / PI.sqrt();
        assert!((got - (s * s / 2.0f64).exp()).abs() < 1e-12);
    }
}
