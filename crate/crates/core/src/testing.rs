//! LSD-based hypothesis tests and Monte Carlo harnesses.
//!
//! - one-sample `W = 2n LSD(f_θ̂, f_θ0)` with a chi-square mixture null;
//! - two-sample `S = (2nm/(n+m)) LSD(f_θ̂₁, f_θ̂₂)` with the null evaluated
//!   at `θ̂₁`;
//! - the directional statistic `*S = S/ζ`, `ζ = A K / J²` at the pooled
//!   estimate, referred to a single chi-square with one degree of freedom.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::asymptotics::{
    a_matrix, chisq_mixture_pvalue, chisq_mixture_quantile, lsd_gradient_first, model_lsd,
    model_sandwich, model_sandwich_variance, null_distribution, sandwich_variance, QuadFormNull,
    DEFAULT_DRAWS,
};
use crate::divergence::TuningPair;
use crate::error::{LsdError, Result};
use crate::estimation::{minimize_lsd, EstimationResult, EstimatorConfig, FrequencyTable};
use crate::models::ModelFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sides {
    OneSided,
    TwoSided,
}

/// Null law the p-value was computed under.
#[derive(Debug, Clone, PartialEq)]
pub enum NullSpec {
    QuadForm(QuadFormNull),
    ChiSquareOne,
}

/// How the directional two-sample p-value is read off `*S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PValueConvention {
    /// `1 − Φ(sign(θ̂_treated − θ̂_control) √*S)`.
    #[default]
    SignedRoot,
    /// `P(χ²₁ > *S)`, ignoring direction.
    UpperTail,
}

impl PValueConvention {
    pub fn name(self) -> &'static str {
        match self {
            PValueConvention::SignedRoot => "signed-root",
            PValueConvention::UpperTail => "upper-tail",
        }
    }
}

impl std::str::FromStr for PValueConvention {
    type Err = LsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed-root" => Ok(PValueConvention::SignedRoot),
            "upper-tail" => Ok(PValueConvention::UpperTail),
            other => Err(LsdError::BadParameter(format!(
                "unknown p-value convention `{other}` (signed-root | upper-tail)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub pvalue: f64,
    /// Monte Carlo standard error, for mixture nulls.
    pub pvalue_std_error: Option<f64>,
    pub null_spec: NullSpec,
    /// `θ̂` values in the order the statistic uses them.
    pub estimates: Vec<Vec<f64>>,
    pub tuning: TuningPair,
    pub sides: Sides,
    pub convention: Option<PValueConvention>,
    pub alpha: f64,
}

impl TestResult {
    pub fn rejects(&self) -> bool {
        self.pvalue < self.alpha
    }
}

/// Estimator and Monte Carlo settings shared by the tests.
#[derive(Debug, Clone, PartialEq)]
pub struct TestOptions {
    pub estimator: EstimatorConfig,
    pub draws: usize,
    pub seed: u64,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            estimator: EstimatorConfig::default(),
            draws: DEFAULT_DRAWS,
            seed: 1,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(LsdError::BadParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )))
    }
}

/// Rounding can leave a divergence of equal densities a hair below zero.
fn nonneg(x: f64) -> f64 {
    x.max(0.0)
}

fn mixture_pvalue(
    null: &QuadFormNull,
    stat: f64,
    opts: &TestOptions,
) -> Result<(f64, Option<f64>)> {
    if null.eigenvalues.is_empty() {
        // degenerate null: the statistic converges to zero
        return Ok((if stat > 0.0 { 0.0 } else { 1.0 }, None));
    }
    let tail = chisq_mixture_pvalue(&null.eigenvalues, stat, opts.draws, opts.seed)?;
    Ok((tail.pvalue, Some(tail.std_error)))
}

/// Simple null `H₀: θ = θ0` via `W = 2n LSD(f_θ̂, f_θ0)`.
pub fn one_sample_test(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    theta0: &[f64],
    t: &TuningPair,
    alpha: f64,
    opts: &TestOptions,
) -> Result<TestResult> {
    check_alpha(alpha)?;
    family.check_theta(theta0)?;
    let fit = minimize_lsd(table, family, t, &opts.estimator)?;
    let statistic = nonneg(2.0 * table.n() as f64 * model_lsd(family, &fit.theta_hat, theta0, t)?);
    let null = null_distribution(family, theta0, t)?;
    let (pvalue, se) = mixture_pvalue(&null, statistic, opts)?;
    Ok(TestResult {
        statistic,
        pvalue,
        pvalue_std_error: se,
        null_spec: NullSpec::QuadForm(null),
        estimates: vec![fit.theta_hat],
        tuning: *t,
        sides: Sides::TwoSided,
        convention: None,
        alpha,
    })
}

fn two_sample_factor(n: u64, m: u64) -> f64 {
    let (n, m) = (n as f64, m as f64);
    2.0 * n * m / (n + m)
}

/// `H₀: θ₁ = θ₂` via `S = (2nm/(n+m)) LSD(f_θ̂₁, f_θ̂₂)`.
pub fn two_sample_test(
    table1: &FrequencyTable,
    table2: &FrequencyTable,
    family: &dyn ModelFamily,
    t: &TuningPair,
    alpha: f64,
    opts: &TestOptions,
) -> Result<TestResult> {
    check_alpha(alpha)?;
    let fit1 = minimize_lsd(table1, family, t, &opts.estimator)?;
    let fit2 = minimize_lsd(table2, family, t, &opts.estimator)?;
    let statistic = nonneg(
        two_sample_factor(table1.n(), table2.n())
            * model_lsd(family, &fit1.theta_hat, &fit2.theta_hat, t)?,
    );
    let null = null_distribution(family, &fit1.theta_hat, t)?;
    let (pvalue, se) = mixture_pvalue(&null, statistic, opts)?;
    Ok(TestResult {
        statistic,
        pvalue,
        pvalue_std_error: se,
        null_spec: NullSpec::QuadForm(null),
        estimates: vec![fit1.theta_hat, fit2.theta_hat],
        tuning: *t,
        sides: Sides::TwoSided,
        convention: None,
        alpha,
    })
}

/// Minimum LSD fit of the cell-wise pooled table.
pub fn pooled_estimate(
    table1: &FrequencyTable,
    table2: &FrequencyTable,
    family: &dyn ModelFamily,
    t: &TuningPair,
    config: &EstimatorConfig,
) -> Result<EstimationResult> {
    minimize_lsd(&table1.pooled(table2), family, t, config)
}

/// Directional two-sample test of `H₁: θ_treated > θ_control` with
/// `*S = S/ζ(θ̂₀)`, `θ̂₀` the pooled estimate.
///
/// Estimates are reported as `[control, treated, pooled]`.
pub fn signed_two_sample_test(
    control: &FrequencyTable,
    treated: &FrequencyTable,
    family: &dyn ModelFamily,
    t: &TuningPair,
    alpha: f64,
    convention: PValueConvention,
    config: &EstimatorConfig,
) -> Result<TestResult> {
    check_alpha(alpha)?;
    if family.param_dim() != 1 {
        return Err(LsdError::BadParameter(
            "the signed two-sample test needs a scalar parameter".into(),
        ));
    }
    let fit1 = minimize_lsd(control, family, t, config)?;
    let fit2 = minimize_lsd(treated, family, t, config)?;
    let fit0 = pooled_estimate(control, treated, family, t, config)?;
    let zeta = zeta(family, &fit0.theta_hat, t)?;
    let s = two_sample_factor(control.n(), treated.n())
        * model_lsd(family, &fit1.theta_hat, &fit2.theta_hat, t)?;
    let statistic = nonneg(s / zeta);
    let diff = fit2.theta_hat[0] - fit1.theta_hat[0];
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let normal = Normal::standard();
    let root = statistic.sqrt();
    let (pvalue, sides) = match convention {
        PValueConvention::SignedRoot => (normal.sf(sign * root), Sides::OneSided),
        PValueConvention::UpperTail => (2.0 * normal.sf(root), Sides::TwoSided),
    };
    Ok(TestResult {
        statistic,
        pvalue: pvalue.clamp(0.0, 1.0),
        pvalue_std_error: None,
        null_spec: NullSpec::ChiSquareOne,
        estimates: vec![fit1.theta_hat, fit2.theta_hat, fit0.theta_hat],
        tuning: *t,
        sides,
        convention: Some(convention),
        alpha,
    })
}

/// `ζ(θ) = A_β(θ) K_β(θ) / J_β(θ)²` for a scalar parameter.
pub fn zeta(family: &dyn ModelFamily, theta: &[f64], t: &TuningPair) -> Result<f64> {
    let sm = model_sandwich(family, theta, t)?;
    if sm.j_mat.nrows() != 1 {
        return Err(LsdError::BadParameter(
            "ζ is defined for scalar parameters".into(),
        ));
    }
    let j = sm.j_mat[(0, 0)];
    if !(j.abs() > 1e-300) {
        return Err(LsdError::SingularMatrix(format!(
            "J = {j:e} at θ = {theta:?}"
        )));
    }
    let a = a_matrix(family, theta, t)?[(0, 0)];
    Ok(a * sm.v_mat[(0, 0)] / (j * j))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerApprox {
    pub theta_star: Vec<f64>,
    pub sigma: f64,
    pub m_vec: Vec<f64>,
    pub critical_value: f64,
    pub power: f64,
}

/// Large-sample power of the level-`alpha` one-sample test at `θ*`:
/// `1 − Φ(√n/σ (t_α/(2n) − LSD(f_θ*, f_θ0)))`, `σ² = Mᵀ J⁻¹ K J⁻¹ M`.
pub fn power_approximation(
    theta_star: &[f64],
    theta0: &[f64],
    family: &dyn ModelFamily,
    t: &TuningPair,
    n: u64,
    alpha: f64,
    opts: &TestOptions,
) -> Result<PowerApprox> {
    check_alpha(alpha)?;
    if n == 0 {
        return Err(LsdError::BadParameter(
            "sample size must be positive".into(),
        ));
    }
    if theta_star == theta0 {
        return Err(LsdError::BadParameter("θ* must differ from θ0".into()));
    }
    let m_vec = lsd_gradient_first(family, theta_star, theta0, t)?;
    let sigma_mat = model_sandwich_variance(family, theta_star, t)?;
    let m = nalgebra::DVector::from_column_slice(&m_vec);
    let sigma2 = (m.transpose() * sigma_mat * &m)[(0, 0)];
    if !(sigma2 > 0.0) {
        return Err(LsdError::BadParameter(format!(
            "σ² = {sigma2:e} is not positive"
        )));
    }
    let sigma = sigma2.sqrt();
    let null = null_distribution(family, theta0, t)?;
    let critical_value =
        chisq_mixture_quantile(&null.eigenvalues, 1.0 - alpha, opts.draws, opts.seed)?;
    let lsd = model_lsd(family, theta_star, theta0, t)?;
    let n = n as f64;
    let z = n.sqrt() / sigma * (critical_value / (2.0 * n) - lsd);
    Ok(PowerApprox {
        theta_star: theta_star.to_vec(),
        sigma,
        m_vec,
        critical_value,
        power: Normal::standard().sf(z).clamp(0.0, 1.0),
    })
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

fn draw_table(
    family: &dyn ModelFamily,
    theta: &[f64],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FrequencyTable> {
    let xs: Vec<u64> = (0..n).map(|_| family.sample(theta, rng)).collect();
    FrequencyTable::from_observations(&xs)
}

/// Sampling distribution of `√n(θ̂ − θ)` for a scalar family.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSummary {
    pub theta_true: f64,
    pub n: usize,
    pub replicates: usize,
    /// `θ̂` of every successful fit, in replicate order.
    pub estimates: Vec<f64>,
    pub failures: usize,
    pub unconverged: usize,
    pub mean: Option<f64>,
    /// Sample variance; `None` with fewer than two fits.
    pub variance: Option<f64>,
    /// `J⁻¹ V J⁻¹` at the true parameter.
    pub sandwich: f64,
}

pub fn simulate_estimator_distribution(
    family: &dyn ModelFamily,
    theta_true: f64,
    t: &TuningPair,
    n: usize,
    replicates: usize,
    seed: u64,
    config: &EstimatorConfig,
) -> Result<SimulationSummary> {
    if family.param_dim() != 1 {
        return Err(LsdError::BadParameter(
            "simulation supports scalar families".into(),
        ));
    }
    if n == 0 || replicates == 0 {
        return Err(LsdError::BadParameter(
            "n and replicates must be positive".into(),
        ));
    }
    let theta = [theta_true];
    family.check_theta(&theta)?;
    let sandwich = model_sandwich_variance(family, &theta, t)?[(0, 0)];
    let fits: Vec<Option<EstimationResult>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let table = draw_table(family, &theta, n, &mut rng).ok()?;
            minimize_lsd(&table, family, t, config).ok()
        })
        .collect();
    let failures = fits.iter().filter(|f| f.is_none()).count();
    let unconverged = fits.iter().flatten().filter(|f| !f.converged).count();
    let estimates: Vec<f64> = fits.iter().flatten().map(|f| f.theta_hat[0]).collect();
    let scaled: Vec<f64> = estimates
        .iter()
        .map(|e| (n as f64).sqrt() * (e - theta_true))
        .collect();
    let k = scaled.len() as f64;
    let mean = (!scaled.is_empty()).then(|| scaled.iter().sum::<f64>() / k);
    let variance = (scaled.len() >= 2).then(|| {
        let m = mean.expect("nonempty");
        scaled.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (k - 1.0)
    });
    Ok(SimulationSummary {
        theta_true,
        n,
        replicates,
        estimates,
        failures,
        unconverged,
        mean,
        variance,
        sandwich,
    })
}

/// Empirical size of the one-sample test under `θ0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSummary {
    pub replicates: usize,
    pub rejections: usize,
    pub failures: usize,
    pub rejection_rate: f64,
    pub critical_value: f64,
    pub nominal: f64,
}

/// Draws `replicates` samples of size `n` from `f_θ0` and rejects when
/// `W` exceeds the Monte Carlo `(1−α)` null quantile, computed once.
#[allow(clippy::too_many_arguments)]
pub fn simulate_test_level(
    family: &dyn ModelFamily,
    theta0: &[f64],
    t: &TuningPair,
    n: usize,
    replicates: usize,
    alpha: f64,
    seed: u64,
    opts: &TestOptions,
) -> Result<LevelSummary> {
    check_alpha(alpha)?;
    if n == 0 || replicates == 0 {
        return Err(LsdError::BadParameter(
            "n and replicates must be positive".into(),
        ));
    }
    family.check_theta(theta0)?;
    let null = null_distribution(family, theta0, t)?;
    let critical_value =
        chisq_mixture_quantile(&null.eigenvalues, 1.0 - alpha, opts.draws, opts.seed)?;
    let outcomes: Vec<Option<bool>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let table = draw_table(family, theta0, n, &mut rng).ok()?;
            let fit = minimize_lsd(&table, family, t, &opts.estimator).ok()?;
            let w = 2.0 * n as f64 * model_lsd(family, &fit.theta_hat, theta0, t).ok()?;
            Some(w > critical_value)
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    let rejections = outcomes.iter().flatten().filter(|&&r| r).count();
    let done = replicates - failures;
    Ok(LevelSummary {
        replicates,
        rejections,
        failures,
        rejection_rate: if done > 0 {
            rejections as f64 / done as f64
        } else {
            f64::NAN
        },
        critical_value,
        nominal: alpha,
    })
}

/// `σ² = Mᵀ J⁻¹ K J⁻¹ M` from explicit factors, for cross-checks.
pub fn sigma_squared(
    family: &dyn ModelFamily,
    theta_star: &[f64],
    theta0: &[f64],
    t: &TuningPair,
) -> Result<f64> {
    let m = nalgebra::DVector::from_vec(lsd_gradient_first(family, theta_star, theta0, t)?);
    let s = sandwich_variance(&model_sandwich(family, theta_star, t)?)?;
    Ok((m.transpose() * s * &m)[(0, 0)])
}
