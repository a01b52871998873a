//! Divergences between finite discrete densities.
//!
//! The central object is the logarithmic super divergence
//!
//! ```text
//! LSD(g, f) = (1/A) ln Σ f^(1+β) − ((1+β)/(A B)) ln Σ f^B g^A + (1/B) ln Σ g^(1+β)
//! ```
//!
//! with `A = 1 + γ(1−β)` and `B = β − γ(1−β)`. It contains the logarithmic
//! power divergence (`β = 0`) and the logarithmic density power divergence
//! (`γ = 0`). The non-logarithmic relatives (power divergence, density power
//! divergence and the S-divergence) are provided alongside for reductions and
//! cross-checks.
//!
//! All log-sums go through a max-shifted log-sum-exp on log-masses, so long
//! model tails with `f^(1+β)` below the smallest normal double are handled.

use serde::Serialize;

use crate::error::{LsdError, Result};
use crate::numeric::{ln0, ln_mean_exp, log_sum_exp, weighted_mean};

/// Tolerance for classifying `A` or `B` as zero.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// Default truncation tolerance for probability vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Which exponent, if any, sits on a singular point of the LSD formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    None,
    AZero,
    BZero,
}

/// The `(β, γ)` tuning parameters together with the derived exponents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TuningPair {
    beta: f64,
    gamma: f64,
    a_exp: f64,
    b_exp: f64,
}

impl TuningPair {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        if !beta.is_finite() || !gamma.is_finite() {
            return Err(LsdError::BadParameter(format!(
                "tuning parameters must be finite (beta={beta}, gamma={gamma})"
            )));
        }
        if beta < 0.0 {
            return Err(LsdError::BadParameter(format!(
                "beta must be nonnegative, got {beta}"
            )));
        }
        let (a_exp, b_exp) = split_exact(
            1.0 + beta,
            1.0 + gamma * (1.0 - beta),
            beta - gamma * (1.0 - beta),
        );
        Ok(TuningPair {
            beta,
            gamma,
            a_exp,
            b_exp,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `A = 1 + γ(1−β)`.
    pub fn a_exp(&self) -> f64 {
        self.a_exp
    }

    /// `B = β − γ(1−β)`.
    pub fn b_exp(&self) -> f64 {
        self.b_exp
    }

    pub fn a_zero(&self) -> bool {
        self.a_exp.abs() <= DEGENERACY_EPS
    }

    pub fn b_zero(&self) -> bool {
        self.b_exp.abs() <= DEGENERACY_EPS
    }

    /// `A + B = 1 + β` rules out both being zero at once.
    pub fn degeneracy(&self) -> Degeneracy {
        if self.a_zero() {
            Degeneracy::AZero
        } else if self.b_zero() {
            Degeneracy::BZero
        } else {
            Degeneracy::None
        }
    }

    /// `A > 0` outside the degeneracy band: the data term `g^A` is bounded.
    pub fn a_positive(&self) -> bool {
        self.a_exp > DEGENERACY_EPS
    }

    pub(crate) fn degenerate(&self, reason: impl Into<String>) -> LsdError {
        LsdError::DegenerateTuning {
            beta: self.beta,
            gamma: self.gamma,
            reason: reason.into(),
        }
    }
}

/// Exponents `(a, b)` with `a + b == total` in floating point, each within
/// an ulp of the supplied approximations. Subtracting from `total` twice
/// makes the second difference exact whenever its operands are within a
/// factor of two of each other. If both exponents are far larger than
/// `total` (large `|γ(1−β)|`) no such pair exists on the f64 grid and the sum
/// is off by at most an ulp of the larger exponent.
fn split_exact(total: f64, a: f64, b: f64) -> (f64, f64) {
    let b1 = total - a;
    let a1 = total - b1;
    if a1 + b1 == total {
        return (a1, b1);
    }
    let a2 = total - b;
    (a2, total - a2)
}

pub fn derive_tuning(beta: f64, gamma: f64) -> Result<TuningPair> {
    TuningPair::new(beta, gamma)
}

/// Nonnegative masses on a strictly increasing integer support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteDensity {
    support: Vec<u64>,
    mass: Vec<f64>,
}

impl DiscreteDensity {
    pub fn new(support: Vec<u64>, mass: Vec<f64>) -> Result<Self> {
        if support.len() != mass.len() {
            return Err(LsdError::BadParameter(format!(
                "support has {} points but {} masses were given",
                support.len(),
                mass.len()
            )));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LsdError::BadParameter(
                "support must be strictly increasing".into(),
            ));
        }
        if let Some(m) = mass.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(LsdError::BadParameter(format!(
                "masses must be finite and nonnegative, got {m}"
            )));
        }
        Ok(DiscreteDensity { support, mass })
    }

    /// Masses on the support `{0, 1, …, len−1}`.
    pub fn on_range(mass: Vec<f64>) -> Result<Self> {
        let support = (0..mass.len() as u64).collect();
        Self::new(support, mass)
    }

    pub fn support(&self) -> &[u64] {
        &self.support
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Total mass in `[1 − eps, 1]` (with a few ulps of slack above 1).
    pub fn is_probability(&self, eps: f64) -> bool {
        let total = self.total_mass();
        total >= 1.0 - eps && total <= 1.0 + 8.0 * f64::EPSILON * self.len().max(1) as f64
    }

    /// Mass at `x`, zero off the support.
    pub fn mass_at(&self, x: u64) -> f64 {
        self.support
            .binary_search(&x)
            .map(|i| self.mass[i])
            .unwrap_or(0.0)
    }

    pub fn has_zero_cell(&self) -> bool {
        self.mass.contains(&0.0)
    }

    fn ln_mass(&self) -> Vec<f64> {
        self.mass.iter().map(|&m| ln0(m)).collect()
    }
}

fn check_pair(g: &DiscreteDensity, f: &DiscreteDensity) -> Result<()> {
    if g.support != f.support {
        return Err(LsdError::SupportMismatch(format!(
            "densities live on different supports ({} vs {} points)",
            g.len(),
            f.len()
        )));
    }
    if g.is_empty() {
        return Err(LsdError::BadParameter("empty support".into()));
    }
    if let Some(i) = f.mass.iter().position(|&m| m <= 0.0) {
        return Err(LsdError::BadParameter(format!(
            "model density must be strictly positive; zero mass at x={}",
            f.support[i]
        )));
    }
    if g.mass.iter().all(|&m| m == 0.0) {
        return Err(LsdError::BadParameter(
            "data density has no positive mass".into(),
        ));
    }
    Ok(())
}

/// Logarithmic super divergence `LSD_{β,γ}(g, f)`.
///
/// `B = 0` uses the analytic limit
/// `(L_f − L_g)/(1+β) + Σ g^(1+β) ln(g/f) / Σ g^(1+β)` where `L_h = ln Σ h^(1+β)`.
/// `A = 0` with strictly positive `g` uses the mirror limit
/// `(L_g − L_f)/(1+β) + Σ f^(1+β) ln(f/g) / Σ f^(1+β)`.
/// `A ≤ 0` with any empty cell in `g` is [`LsdError::DegenerateTuning`].
pub fn lsd_divergence(g: &DiscreteDensity, f: &DiscreteDensity, t: &TuningPair) -> Result<f64> {
    check_pair(g, f)?;
    if !t.a_positive() && g.has_zero_cell() {
        return Err(t.degenerate("A <= 0 with an empty data cell makes g^A unbounded"));
    }
    let lg = g.ln_mass();
    let lf = f.ln_mass();
    Ok(lsd_from_logs(&lg, &lf, t))
}

/// LSD on log-masses. `lf` must be finite; `lg` may contain `-inf` when `A > 0`.
pub(crate) fn lsd_from_logs(lg: &[f64], lf: &[f64], t: &TuningPair) -> f64 {
    let p = 1.0 + t.beta();
    let lw_f: Vec<f64> = lf.iter().map(|&l| p * l).collect();
    let lw_g: Vec<f64> = lg.iter().map(|&l| p * l).collect();
    let l_f = log_sum_exp(lw_f.iter().copied());
    let l_g = log_sum_exp(lw_g.iter().copied());
    match t.degeneracy() {
        Degeneracy::BZero => {
            let log_ratio: Vec<f64> = lg.iter().zip(lf).map(|(a, b)| a - b).collect();
            (l_f - l_g) / p + weighted_mean(&lw_g, &log_ratio)
        }
        Degeneracy::AZero => {
            let log_ratio: Vec<f64> = lf.iter().zip(lg).map(|(a, b)| a - b).collect();
            (l_g - l_f) / p + weighted_mean(&lw_f, &log_ratio)
        }
        Degeneracy::None => {
            // With p = a + b the cross term splits into one ratio against each
            // self term, and each ratio is a weighted mean of exp(±(lg − lf)).
            let (a, b) = (t.a_exp(), t.b_exp());
            let g_over_f: Vec<f64> = lg.iter().zip(lf).map(|(g, f)| g - f).collect();
            let f_over_g: Vec<f64> = g_over_f.iter().map(|d| -d).collect();
            -ln_mean_exp(&lw_f, &g_over_f, a) / a - ln_mean_exp(&lw_g, &f_over_g, b) / b
        }
    }
}

/// Likelihood disparity `Σ g ln(g/f)` (`PD_0`), with `0 ln 0 = 0`.
pub fn likelihood_disparity(g: &DiscreteDensity, f: &DiscreteDensity) -> Result<f64> {
    check_pair(g, f)?;
    Ok(g.mass
        .iter()
        .zip(&f.mass)
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, f)| g * (g / f).ln())
        .sum())
}

/// Kullback–Leibler divergence in the `Σ f ln(f/g)` orientation (`PD_{-1}`).
pub fn kullback_leibler(g: &DiscreteDensity, f: &DiscreteDensity) -> Result<f64> {
    check_pair(g, f)?;
    if g.has_zero_cell() {
        return Err(LsdError::DegenerateTuning {
            beta: 0.0,
            gamma: -1.0,
            reason: "KLD needs a strictly positive data density".into(),
        });
    }
    Ok(f.mass
        .iter()
        .zip(&g.mass)
        .map(|(f, g)| f * (f / g).ln())
        .sum())
}

fn is_zero(x: f64) -> bool {
    x.abs() <= DEGENERACY_EPS
}

fn power_family_guard(g: &DiscreteDensity, lambda: f64) -> Result<()> {
    if 1.0 + lambda <= 0.0 && g.has_zero_cell() {
        return Err(LsdError::DegenerateTuning {
            beta: 0.0,
            gamma: lambda,
            reason: "lambda <= -1 with an empty data cell makes (g/f)^lambda unbounded".into(),
        });
    }
    Ok(())
}

/// `ln Σ g^(1+λ) f^(−λ)` over the cells where the term is nonzero.
fn ln_power_sum(g: &DiscreteDensity, f: &DiscreteDensity, lambda: f64) -> f64 {
    log_sum_exp(
        g.mass
            .iter()
            .zip(&f.mass)
            .filter(|(g, _)| **g > 0.0)
            .map(|(g, f)| (1.0 + lambda) * g.ln() - lambda * f.ln()),
    )
}

/// `Σ g [(g/f)^λ − 1]` over the cells with `g > 0`, accurate for small `λ`.
fn power_excess(g: &DiscreteDensity, f: &DiscreteDensity, lambda: f64) -> f64 {
    g.mass
        .iter()
        .zip(&f.mass)
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, f)| g * (lambda * (g.ln() - f.ln())).exp_m1())
        .sum()
}

/// Cressie–Read power divergence `(1/(λ(λ+1))) Σ g[(g/f)^λ − 1]`.
pub fn pd_divergence(g: &DiscreteDensity, f: &DiscreteDensity, lambda: f64) -> Result<f64> {
    if !lambda.is_finite() {
        return Err(LsdError::BadParameter(format!(
            "lambda must be finite, got {lambda}"
        )));
    }
    if is_zero(lambda) {
        return likelihood_disparity(g, f);
    }
    if is_zero(lambda + 1.0) {
        return kullback_leibler(g, f);
    }
    check_pair(g, f)?;
    power_family_guard(g, lambda)?;
    let excess = power_excess(g, f, lambda);
    let excess = if excess.is_finite() {
        excess
    } else {
        ln_power_sum(g, f, lambda).exp() - g.total_mass()
    };
    Ok(excess / (lambda * (lambda + 1.0)))
}

/// Logarithmic power divergence `(1/(γ(γ+1))) ln Σ g^(1+γ) / f^γ`.
pub fn lpd_divergence(g: &DiscreteDensity, f: &DiscreteDensity, gamma: f64) -> Result<f64> {
    if !gamma.is_finite() {
        return Err(LsdError::BadParameter(format!(
            "gamma must be finite, got {gamma}"
        )));
    }
    if is_zero(gamma) {
        return likelihood_disparity(g, f);
    }
    if is_zero(gamma + 1.0) {
        return kullback_leibler(g, f);
    }
    check_pair(g, f)?;
    power_family_guard(g, gamma)?;
    // ln Σ g^(1+γ) f^(−γ) for normalized g
    let excess = power_excess(g, f, gamma);
    let ln_sum = if excess.is_finite() {
        excess.ln_1p()
    } else {
        ln_power_sum(g, f, gamma)
    };
    Ok(ln_sum / (gamma * (gamma + 1.0)))
}

/// Logarithmic density power divergence
/// `ln Σ f^(1+β) − (1 + 1/β) ln Σ f^β g + (1/β) ln Σ g^(1+β)`.
pub fn ldpd_divergence(g: &DiscreteDensity, f: &DiscreteDensity, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(LsdError::BadParameter(format!(
            "beta must be nonnegative, got {beta}"
        )));
    }
    if is_zero(beta) {
        return likelihood_disparity(g, f);
    }
    check_pair(g, f)?;
    let lf = f.ln_mass();
    let lg = g.ln_mass();
    let p = 1.0 + beta;
    // (ln Σ f^p − cross) + (ln Σ g^p − cross)/β, each difference a weighted
    // log-mean so the 1/β factor does not amplify rounding
    let lw_f: Vec<f64> = lf.iter().map(|l| p * l).collect();
    let lw_g: Vec<f64> = lg.iter().map(|l| p * l).collect();
    let g_over_f: Vec<f64> = lg.iter().zip(&lf).map(|(g, f)| g - f).collect();
    let f_over_g: Vec<f64> = g_over_f.iter().map(|d| -d).collect();
    Ok(-ln_mean_exp(&lw_f, &g_over_f, 1.0) - ln_mean_exp(&lw_g, &f_over_g, beta) / beta)
}

/// Density power divergence `Σ [f^(1+α) − (1 + 1/α) f^α g + (1/α) g^(1+α)]`.
pub fn dpd_divergence(g: &DiscreteDensity, f: &DiscreteDensity, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(LsdError::BadParameter(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    if is_zero(alpha) {
        return likelihood_disparity(g, f);
    }
    check_pair(g, f)?;
    Ok(g.mass
        .iter()
        .zip(&f.mass)
        .map(|(&g, &f)| {
            f.powf(1.0 + alpha) - (1.0 + 1.0 / alpha) * f.powf(alpha) * g
                + g.powf(1.0 + alpha) / alpha
        })
        .sum())
}

/// S-divergence: the LSD with every logarithm replaced by the identity.
///
/// Exponents come from `derive_tuning(alpha, lambda)`. `B = 0` has no
/// implemented limit and is rejected.
pub fn s_divergence(
    g: &DiscreteDensity,
    f: &DiscreteDensity,
    alpha: f64,
    lambda: f64,
) -> Result<f64> {
    let t = derive_tuning(alpha, lambda)?;
    check_pair(g, f)?;
    if t.b_zero() {
        return Err(LsdError::BadParameter(format!(
            "S-divergence at B = 0 (alpha={alpha}, lambda={lambda}) is not supported"
        )));
    }
    if !t.a_positive() && g.has_zero_cell() {
        return Err(t.degenerate("A <= 0 with an empty data cell makes g^A unbounded"));
    }
    let p = 1.0 + alpha;
    let sum_f: f64 = f.mass.iter().map(|m| m.powf(p)).sum();
    let sum_g: f64 = g.mass.iter().map(|m| m.powf(p)).sum();
    if t.a_zero() {
        let kl_term: f64 = g
            .mass
            .iter()
            .zip(&f.mass)
            .map(|(g, f)| f.powf(p) * (f / g).ln())
            .sum();
        return Ok(kl_term + (sum_g - sum_f) / p);
    }
    let (a, b) = (t.a_exp(), t.b_exp());
    let cross: f64 = g
        .mass
        .iter()
        .zip(&f.mass)
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, f)| (b * f.ln() + a * g.ln()).exp())
        .sum();
    Ok(sum_f / a - p / (a * b) * cross + sum_g / b)
}
