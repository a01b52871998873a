//! Discrete parametric families on `{0, 1, 2, …}`.
//!
//! A family exposes its log-pmf, score `u_θ(x) = ∇ ln f_θ(x)`, the score
//! Jacobian, and the truncation point of its right tail. The raw evaluation
//! methods assume `θ` already passed [`ModelFamily::check_theta`]; callers in
//! this crate validate once per public entry point.

use std::fmt::Debug;

use nalgebra::DMatrix;
use rand::RngCore;
use rand_distr::{Distribution, Geometric as GeometricDist, Poisson as PoissonDist};
use statrs::function::factorial::ln_factorial;
use statrs::function::gamma::gamma_lr;

use crate::divergence::DiscreteDensity;
use crate::error::{LsdError, Result};

/// Default right-tail truncation mass.
pub const SUPPORT_EPS: f64 = 1e-12;

pub trait ModelFamily: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn param_dim(&self) -> usize;

    /// Open box of admissible parameters, one `(lo, hi)` per coordinate.
    fn param_bounds(&self) -> Vec<(f64, f64)>;

    fn ln_pmf(&self, theta: &[f64], x: u64) -> f64;

    fn score(&self, theta: &[f64], x: u64) -> Vec<f64>;

    /// `∂u_θ(x)/∂θ`, a `p × p` matrix.
    fn score_grad(&self, theta: &[f64], x: u64) -> DMatrix<f64>;

    /// Smallest `m` with `P_θ(X > m) ≤ eps`.
    fn support_upper(&self, theta: &[f64], eps: f64) -> u64;

    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> u64;

    /// Closed interval scanned by the scalar optimizer, given the data mean.
    fn search_interval(&self, data_mean: f64) -> (f64, f64);

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        let bounds = self.param_bounds();
        if theta.len() != bounds.len() {
            return Err(LsdError::BadParameter(format!(
                "{} expects {} parameter(s), got {}",
                self.name(),
                bounds.len(),
                theta.len()
            )));
        }
        for (i, (&t, &(lo, hi))) in theta.iter().zip(&bounds).enumerate() {
            if !(t > lo && t < hi) {
                return Err(LsdError::BadParameter(format!(
                    "{} parameter {i} = {t} outside ({lo}, {hi})",
                    self.name()
                )));
            }
        }
        Ok(())
    }

    fn pmf(&self, theta: &[f64], x: u64) -> Result<f64> {
        self.check_theta(theta)?;
        Ok(self.ln_pmf(theta, x).exp())
    }
}

/// Geometric distribution counting failures before the first success,
/// `f_θ(x) = θ(1−θ)^x`, `θ ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Geometric;

impl ModelFamily for Geometric {
    fn name(&self) -> &'static str {
        "geometric"
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn param_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0)]
    }

    fn ln_pmf(&self, theta: &[f64], x: u64) -> f64 {
        let p = theta[0];
        p.ln() + x as f64 * (-p).ln_1p()
    }

    fn score(&self, theta: &[f64], x: u64) -> Vec<f64> {
        let p = theta[0];
        vec![1.0 / p - x as f64 / (1.0 - p)]
    }

    fn score_grad(&self, theta: &[f64], x: u64) -> DMatrix<f64> {
        let p = theta[0];
        let q = 1.0 - p;
        DMatrix::from_element(1, 1, -1.0 / (p * p) - x as f64 / (q * q))
    }

    fn support_upper(&self, theta: &[f64], eps: f64) -> u64 {
        // P(X > m) = (1−θ)^(m+1)
        let ln_q = (-theta[0]).ln_1p();
        let ln_eps = eps.ln();
        let tail_ok = |m: u64| (m as f64 + 1.0) * ln_q <= ln_eps;
        let mut m = ((ln_eps / ln_q).ceil() - 1.0).max(0.0) as u64;
        while m > 0 && tail_ok(m - 1) {
            m -= 1;
        }
        while !tail_ok(m) {
            m += 1;
        }
        m
    }

    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> u64 {
        GeometricDist::new(theta[0])
            .expect("geometric parameter validated by caller")
            .sample(rng)
    }

    fn search_interval(&self, _data_mean: f64) -> (f64, f64) {
        (1e-4, 1.0 - 1e-4)
    }
}

/// Poisson distribution, `f_θ(x) = e^(−θ) θ^x / x!`, `θ > 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Poisson;

impl Poisson {
    fn tail(theta: f64, m: u64) -> f64 {
        // P(X > m) = P(m+1, θ), the regularized lower incomplete gamma
        gamma_lr(m as f64 + 1.0, theta)
    }
}

impl ModelFamily for Poisson {
    fn name(&self) -> &'static str {
        "poisson"
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn param_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, f64::INFINITY)]
    }

    fn ln_pmf(&self, theta: &[f64], x: u64) -> f64 {
        let l = theta[0];
        -l + x as f64 * l.ln() - ln_factorial(x)
    }

    fn score(&self, theta: &[f64], x: u64) -> Vec<f64> {
        vec![x as f64 / theta[0] - 1.0]
    }

    fn score_grad(&self, theta: &[f64], x: u64) -> DMatrix<f64> {
        let l = theta[0];
        DMatrix::from_element(1, 1, -(x as f64) / (l * l))
    }

    fn support_upper(&self, theta: &[f64], eps: f64) -> u64 {
        let l = theta[0];
        let mut m = l.floor() as u64;
        if Self::tail(l, m) > eps {
            while Self::tail(l, m) > eps {
                m += 1;
            }
        } else {
            while m > 0 && Self::tail(l, m - 1) <= eps {
                m -= 1;
            }
        }
        m
    }

    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> u64 {
        let draw: f64 = PoissonDist::new(theta[0])
            .expect("poisson parameter validated by caller")
            .sample(rng);
        draw as u64
    }

    fn search_interval(&self, data_mean: f64) -> (f64, f64) {
        (1e-4, (10.0 * data_mean).max(1.0))
    }
}

pub fn geometric_family() -> Geometric {
    Geometric
}

pub fn poisson_family() -> Poisson {
    Poisson
}

/// Looks a built-in family up by name (`geometric` or `poisson`).
pub fn family_by_name(name: &str) -> Result<Box<dyn ModelFamily>> {
    match name.to_ascii_lowercase().as_str() {
        "geometric" => Ok(Box::new(Geometric)),
        "poisson" => Ok(Box::new(Poisson)),
        other => Err(LsdError::BadParameter(format!(
            "unknown model family `{other}`"
        ))),
    }
}

/// `{0, …, m}` with model tail mass beyond `m` at most `eps`.
pub fn truncated_support(family: &dyn ModelFamily, theta: &[f64], eps: f64) -> Result<Vec<u64>> {
    family.check_theta(theta)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(LsdError::BadParameter(format!(
            "truncation tolerance must lie in (0, 1), got {eps}"
        )));
    }
    Ok((0..=family.support_upper(theta, eps)).collect())
}

/// Log-pmf of the family on an explicit support.
pub(crate) fn ln_pmf_on(family: &dyn ModelFamily, theta: &[f64], support: &[u64]) -> Vec<f64> {
    support.iter().map(|&x| family.ln_pmf(theta, x)).collect()
}

/// The model pmf as a [`DiscreteDensity`] on `support`.
pub fn model_density(
    family: &dyn ModelFamily,
    theta: &[f64],
    support: &[u64],
) -> Result<DiscreteDensity> {
    family.check_theta(theta)?;
    let mass = ln_pmf_on(family, theta, support)
        .into_iter()
        .map(f64::exp)
        .collect();
    DiscreteDensity::new(support.to_vec(), mass)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn geometric_examples() {
        let g = geometric_family();
        close(g.pmf(&[0.5], 0).unwrap(), 0.5, 1e-15);
        close(g.pmf(&[0.5], 3).unwrap(), 0.0625, 1e-15);
        close(g.score(&[0.5], 1)[0], 0.0, 1e-15);
        assert!(g.pmf(&[1.0], 0).is_err());
        assert!(g.pmf(&[0.0], 0).is_err());
    }

    #[test]
    fn poisson_examples() {
        let p = poisson_family();
        close(p.pmf(&[1.0], 0).unwrap(), (-1.0f64).exp(), 1e-15);
        close(p.score(&[2.0], 2)[0], 0.0, 1e-15);
        assert!(p.pmf(&[0.0], 0).is_err());
        assert!(p.pmf(&[-1.0], 0).is_err());
        assert!(p.check_theta(&[1.0, 2.0]).is_err());
    }

    /// Cumulative-sum oracle for the smallest `m` with tail ≤ eps.
    fn tail_oracle(family: &dyn ModelFamily, theta: f64, eps: f64) -> u64 {
        let mut cdf = 0.0;
        let mut m = 0;
        loop {
            cdf += family.pmf(&[theta], m).unwrap();
            if 1.0 - cdf <= eps {
                return m;
            }
            m += 1;
        }
    }

    #[test]
    fn poisson_support_upper_matches_cumulative_sum() {
        let p = poisson_family();
        for &(theta, eps) in &[
            (0.36, 1e-12),
            (0.1, 1e-12),
            (2.0, 1e-10),
            (15.0, 1e-8),
            (3.0, 0.5),
        ] {
            let m = p.support_upper(&[theta], eps);
            let oracle = tail_oracle(&p, theta, eps);
            // the float cdf can misjudge the boundary cell by one when the
            // tail sits within rounding of eps
            assert!(m.abs_diff(oracle) <= 1, "theta={theta}: {m} vs {oracle}");
            assert!(Poisson::tail(theta, m) <= eps);
            if m > 0 {
                assert!(Poisson::tail(theta, m - 1) > eps);
            }
        }
    }

    #[test]
    fn geometric_support_upper_exact() {
        let g = geometric_family();
        // (1/2)^(m+1) ≤ 1e-12 first holds at m + 1 = 40
        assert_eq!(g.support_upper(&[0.5], 1e-12), 39);
        let s = truncated_support(&g, &[0.5], 1e-12).unwrap();
        assert_eq!(s.len(), 40);
    }

    #[test]
    fn truncated_support_edge_cases() {
        let p = poisson_family();
        let s = truncated_support(&p, &[0.1], 1e-12).unwrap();
        assert_eq!(*s.last().unwrap(), tail_oracle(&p, 0.1, 1e-12));
        assert_eq!(s[0], 0);
        assert!(!truncated_support(&p, &[3.0], 0.5).unwrap().is_empty());
        assert!(!truncated_support(&geometric_family(), &[0.9], 0.5)
            .unwrap()
            .is_empty());
        assert!(truncated_support(&p, &[1.0], 0.0).is_err());
        assert!(truncated_support(&p, &[1.0], 1.0).is_err());
        assert!(truncated_support(&p, &[-1.0], 1e-12).is_err());
    }

    #[test]
    fn family_lookup() {
        assert_eq!(family_by_name("Poisson").unwrap().name(), "poisson");
        assert_eq!(family_by_name("geometric").unwrap().name(), "geometric");
        assert!(family_by_name("binomial").is_err());
    }
}
