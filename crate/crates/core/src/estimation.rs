//! Minimum LSD estimation from a frequency table.
//!
//! Minimizing `LSD(r_n, f_θ)` over `θ` is the same as minimizing
//!
//! ```text
//! H_n(θ) = 1/(1+β) [ (1/A) ln Σ f_θ^(1+β) − ((1+β)/(A B)) ln Σ f_θ^B r_n^A ]
//! ```
//!
//! since the dropped term depends on the data only. Every evaluation runs
//! over the union of the observed support and the model support truncated at
//! the current `θ`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::divergence::{DiscreteDensity, TuningPair};
use crate::error::{LsdError, Result};
use crate::models::{ln_pmf_on, ModelFamily, SUPPORT_EPS};
use crate::numeric::{ln0, log_sum_exp, weighted_mean};

/// Observed counts per integer outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrequencyTable {
    counts: BTreeMap<u64, u64>,
    n: u64,
}

impl FrequencyTable {
    /// Builds a table from `(x, count)` pairs, summing duplicate `x`.
    /// Zero counts are dropped.
    pub fn from_counts<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u64)>,
    {
        let mut counts = BTreeMap::new();
        for (x, c) in pairs {
            if c > 0 {
                *counts.entry(x).or_insert(0) += c;
            }
        }
        let n = counts.values().sum();
        if n == 0 {
            return Err(LsdError::EmptyData);
        }
        Ok(FrequencyTable { counts, n })
    }

    /// Table of raw observations.
    pub fn from_observations(xs: &[u64]) -> Result<Self> {
        Self::from_counts(xs.iter().map(|&x| (x, 1)))
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn counts(&self) -> &BTreeMap<u64, u64> {
        &self.counts
    }

    pub fn count(&self, x: u64) -> u64 {
        self.counts.get(&x).copied().unwrap_or(0)
    }

    pub fn max_x(&self) -> u64 {
        *self.counts.keys().next_back().expect("table is nonempty")
    }

    pub fn mean(&self) -> f64 {
        let total: f64 = self.counts.iter().map(|(&x, &c)| x as f64 * c as f64).sum();
        total / self.n as f64
    }

    pub fn observed_support(&self) -> Vec<u64> {
        self.counts.keys().copied().collect()
    }

    /// `r_n(x) = count(x)/n`.
    pub fn relative_frequency(&self, x: u64) -> f64 {
        self.count(x) as f64 / self.n as f64
    }

    /// Copy with the listed cells removed (outlier deletion).
    pub fn without_cells(&self, cells: &[u64]) -> Result<Self> {
        Self::from_counts(
            self.counts
                .iter()
                .filter(|(x, _)| !cells.contains(x))
                .map(|(&x, &c)| (x, c)),
        )
    }

    /// Cell-wise sum of two tables.
    pub fn pooled(&self, other: &FrequencyTable) -> FrequencyTable {
        let mut counts = self.counts.clone();
        for (&x, &c) in &other.counts {
            *counts.entry(x).or_insert(0) += c;
        }
        FrequencyTable {
            counts,
            n: self.n + other.n,
        }
    }
}

/// `r_n` on the given support, zero where nothing was observed.
pub fn relative_density(table: &FrequencyTable, support: &[u64]) -> Result<DiscreteDensity> {
    if let Some(x) = table
        .counts
        .keys()
        .find(|x| support.binary_search(x).is_err())
    {
        return Err(LsdError::SupportMismatch(format!(
            "observed value {x} is missing from the support"
        )));
    }
    let mass = support
        .iter()
        .map(|&x| table.relative_frequency(x))
        .collect();
    DiscreteDensity::new(support.to_vec(), mass)
}

/// `{0, …, max(m_θ, max observed x)}` with `m_θ` the truncation point at `θ`.
pub fn working_support(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    theta: &[f64],
    eps: f64,
) -> Vec<u64> {
    let upper = family.support_upper(theta, eps).max(table.max_x());
    (0..=upper).collect()
}

/// Per-cell quantities shared by the objective, gradient and residual.
struct Cells {
    ln_r: Vec<f64>,
    ln_f: Vec<f64>,
    scores: Vec<Vec<f64>>,
}

impl Cells {
    fn new(table: &FrequencyTable, family: &dyn ModelFamily, theta: &[f64], eps: f64) -> Self {
        let support = working_support(table, family, theta, eps);
        let ln_r = support
            .iter()
            .map(|&x| ln0(table.relative_frequency(x)))
            .collect();
        let ln_f = ln_pmf_on(family, theta, &support);
        let scores = support.iter().map(|&x| family.score(theta, x)).collect();
        Cells { ln_r, ln_f, scores }
    }

    fn score_component(&self, j: usize) -> Vec<f64> {
        self.scores.iter().map(|u| u[j]).collect()
    }

    fn model_log_weights(&self, t: &TuningPair) -> Vec<f64> {
        let p = 1.0 + t.beta();
        self.ln_f.iter().map(|l| p * l).collect()
    }

    /// `ln(f^B r^A)` per cell, `-inf` where `r = 0`.
    fn cross_log_weights(&self, t: &TuningPair) -> Vec<f64> {
        let (a, b) = (t.a_exp(), t.b_exp());
        self.ln_r
            .iter()
            .zip(&self.ln_f)
            .map(|(&lr, &lf)| {
                if lr.is_finite() {
                    a * lr + b * lf
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }
}

fn prepare(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<Cells> {
    family.check_theta(theta)?;
    if !t.a_positive() {
        return Err(t.degenerate("A <= 0: the data term r_n^A is unbounded on empty cells"));
    }
    Ok(Cells::new(table, family, theta, SUPPORT_EPS))
}

/// `H_n(θ)`. At `B = 0` the `θ`-dependent part of the analytic limit is
/// returned, `1/(1+β) [ (1/A) ln Σ f^(1+β) − ((1+β)/A) Σ r^A ln f / Σ r^A ]`.
pub fn objective_hn(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<f64> {
    let cells = prepare(table, family, theta, t)?;
    Ok(objective_from_cells(&cells, t))
}

fn objective_from_cells(cells: &Cells, t: &TuningPair) -> f64 {
    let p = 1.0 + t.beta();
    let a = t.a_exp();
    let l_f = log_sum_exp(cells.model_log_weights(t));
    if t.b_zero() {
        let lw: Vec<f64> = cells.ln_r.iter().map(|lr| a * lr).collect();
        let mean_ln_f = weighted_mean(&lw, &cells.ln_f);
        (l_f / a - p / a * mean_ln_f) / p
    } else {
        let b = t.b_exp();
        let cross = log_sum_exp(cells.cross_log_weights(t));
        (l_f / a - p / (a * b) * cross) / p
    }
}

/// `∇H_n(θ) = (1/A) [ E_{f^(1+β)}[u] − E_{f^B r^A}[u] ]` with the
/// expectations taken under the normalized weights.
pub fn grad_hn(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<Vec<f64>> {
    let cells = prepare(table, family, theta, t)?;
    Ok(grad_from_cells(&cells, t, theta.len()))
}

fn grad_from_cells(cells: &Cells, t: &TuningPair, dim: usize) -> Vec<f64> {
    let lw_model = cells.model_log_weights(t);
    let lw_cross = cells.cross_log_weights(t);
    (0..dim)
        .map(|j| {
            let u = cells.score_component(j);
            (weighted_mean(&lw_model, &u) - weighted_mean(&lw_cross, &u)) / t.a_exp()
        })
        .collect()
}

/// `Σ_x (δ_n(x)^A − 1) f_θ^(1+β)(x) w_θ(x)` with `δ_n = r_n/f_θ` and
/// `w_θ = B(θ) u_θ − A(θ)`, `A(θ) = Σ f^(1+β) u`, `B(θ) = Σ f^(1+β)`.
pub fn estimating_residual(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<Vec<f64>> {
    let cells = prepare(table, family, theta, t)?;
    Ok(residual_from_cells(&cells, t, theta.len()))
}

fn residual_from_cells(cells: &Cells, t: &TuningPair, dim: usize) -> Vec<f64> {
    let p = 1.0 + t.beta();
    let f_pow: Vec<f64> = cells.ln_f.iter().map(|l| (p * l).exp()).collect();
    let big_b: f64 = f_pow.iter().sum();
    let big_a: Vec<f64> = (0..dim)
        .map(|j| f_pow.iter().zip(&cells.scores).map(|(w, u)| w * u[j]).sum())
        .collect();
    let (a, b) = (t.a_exp(), t.b_exp());
    let mut out = vec![0.0; dim];
    for (i, u) in cells.scores.iter().enumerate() {
        // δ^A f^(1+β) = r^A f^B
        let weighted = if cells.ln_r[i].is_finite() {
            (a * cells.ln_r[i] + b * cells.ln_f[i]).exp()
        } else {
            0.0
        };
        let k_term = weighted - f_pow[i];
        for j in 0..dim {
            out[j] += k_term * (big_b * u[j] - big_a[j]);
        }
    }
    out
}

/// Settings for [`minimize_lsd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorConfig {
    /// Equispaced points in the coarse scan.
    pub grid_points: usize,
    /// Golden-section stops once the bracket is narrower than this.
    pub interval_tol: f64,
    /// Largest estimating-equation residual accepted as converged.
    pub residual_tol: f64,
    /// Grid values within this of the best are all refined.
    pub tie_tol: f64,
    pub max_iter: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            grid_points: 200,
            interval_tol: 1e-8,
            residual_tol: 1e-6,
            tie_tol: 1e-12,
            max_iter: 500,
        }
    }
}

/// Output of [`minimize_lsd`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub theta_hat: Vec<f64>,
    pub objective_value: f64,
    pub tuning: TuningPair,
    pub converged: bool,
    pub iterations: usize,
    /// Euclidean norm of the estimating-equation residual at `theta_hat`.
    pub residual_norm: f64,
    /// Covariance of `√n(θ̂ − θ)`, filled in by the asymptotics module.
    pub sandwich_variance: Option<DMatrix<f64>>,
    /// Set when the multi-parameter fallback produced the estimate.
    pub experimental: bool,
}

impl EstimationResult {
    /// Standard errors `sqrt(diag(Σ)/n)`, when the sandwich is present.
    pub fn standard_errors(&self, n: u64) -> Option<Vec<f64>> {
        self.sandwich_variance.as_ref().map(|s| {
            (0..s.nrows())
                .map(|i| (s[(i, i)] / n as f64).sqrt())
                .collect()
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scalar objective with errors mapped to `+inf`.
fn eval_scalar(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    theta: f64,
    t: &TuningPair,
) -> f64 {
    match objective_hn(table, family, &[theta], t) {
        Ok(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search on `[lo, hi]`; returns `(argmin, min, iterations)`.
fn golden_section<F: Fn(f64) -> f64>(
    f: F,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64, usize) {
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut iter = 0;
    while hi - lo > tol && iter < max_iter {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
        iter += 1;
    }
    let (x, fx) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    (x, fx, iter)
}

/// Narrows `θ` onto the sign change of the gradient near the golden-section
/// answer, where objective differences have dropped below rounding.
fn polish_on_gradient(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    t: &TuningPair,
    theta: f64,
    bounds: (f64, f64),
) -> Option<f64> {
    let grad = |x: f64| grad_hn(table, family, &[x], t).ok().map(|g| g[0]);
    let h = 1e-6 * (1.0 + theta.abs());
    let mut lo = (theta - h).max(bounds.0);
    let mut hi = (theta + h).min(bounds.1);
    let (g_lo, g_hi) = (grad(lo)?, grad(hi)?);
    if !(g_lo < 0.0 && g_hi > 0.0) {
        return None;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match grad(mid)? {
            g if g > 0.0 => hi = mid,
            g if g < 0.0 => lo = mid,
            _ => return Some(mid),
        }
    }
    Some(0.5 * (lo + hi))
}

/// Minimum LSD estimate of `θ`.
///
/// Scalar families use a coarse scan over the family's search interval and
/// golden-section refinement of every grid cell tying for the best value;
/// among refined candidates the lowest objective wins and exact ties go to
/// the smallest `θ`. Families with more than one parameter fall back to
/// gradient descent with backtracking, flagged as experimental.
pub fn minimize_lsd(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    t: &TuningPair,
    config: &EstimatorConfig,
) -> Result<EstimationResult> {
    if !t.a_positive() {
        return Err(t.degenerate("A <= 0: minimum LSD estimation is undefined"));
    }
    if family.param_dim() != 1 {
        return minimize_multi(table, family, t, config);
    }
    if config.grid_points < 3 {
        return Err(LsdError::BadParameter("need at least 3 grid points".into()));
    }
    let (lo, hi) = family.search_interval(table.mean());
    let step = (hi - lo) / (config.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..config.grid_points)
        .map(|i| lo + step * i as f64)
        .collect();
    let values: Vec<f64> = grid
        .iter()
        .map(|&x| eval_scalar(table, family, x, t))
        .collect();
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(LsdError::NoConvergence(format!(
            "objective is not finite anywhere on [{lo}, {hi}]"
        )));
    }

    let mut candidates = Vec::new();
    let mut iterations = 0;
    for (i, _) in values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= best + config.tie_tol)
    {
        let a = grid[i.saturating_sub(1)];
        let b = grid[(i + 1).min(grid.len() - 1)];
        let (x, fx, it) = golden_section(
            |x| eval_scalar(table, family, x, t),
            a,
            b,
            config.interval_tol,
            config.max_iter,
        );
        iterations += it;
        candidates.push((x, fx, b - a, it));
    }
    candidates.sort_by(|p, q| p.1.total_cmp(&q.1).then(p.0.total_cmp(&q.0)));
    let floor = candidates[0].1;
    let (mut theta, _, width, it) = candidates
        .iter()
        .filter(|c| c.1 <= floor + config.tie_tol)
        .min_by(|p, q| p.0.total_cmp(&q.0))
        .copied()
        .expect("at least one candidate");

    if let Some(polished) = polish_on_gradient(table, family, t, theta, (lo, hi)) {
        theta = polished;
    }
    let final_width = width * INV_PHI.powi(it as i32);
    let objective_value = objective_hn(table, family, &[theta], t)?;
    let residual_norm = norm(&estimating_residual(table, family, &[theta], t)?);
    Ok(EstimationResult {
        theta_hat: vec![theta],
        objective_value,
        tuning: *t,
        converged: final_width < config.interval_tol && residual_norm < config.residual_tol,
        iterations,
        residual_norm,
        sandwich_variance: None,
        experimental: false,
    })
}

fn initial_theta(family: &dyn ModelFamily, mean: f64) -> Vec<f64> {
    family
        .param_bounds()
        .iter()
        .map(|&(lo, hi)| match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo + mean.max(1.0),
            (false, true) => hi - mean.max(1.0),
            (false, false) => 0.0,
        })
        .collect()
}

fn minimize_multi(
    table: &FrequencyTable,
    family: &dyn ModelFamily,
    t: &TuningPair,
    config: &EstimatorConfig,
) -> Result<EstimationResult> {
    let mut theta = initial_theta(family, table.mean());
    let mut value = objective_hn(table, family, &theta, t)?;
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged_step = false;
    while iterations < config.max_iter * 20 {
        iterations += 1;
        let g = grad_hn(table, family, &theta, t)?;
        let gnorm2: f64 = g.iter().map(|x| x * x).sum();
        if gnorm2.sqrt() < 1e-10 {
            converged_step = true;
            break;
        }
        // Armijo backtracking, staying inside the open parameter box
        let mut accepted = None;
        let mut s = step;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(x, gi)| x - s * gi).collect();
            if family.check_theta(&cand).is_ok() {
                if let Ok(v) = objective_hn(table, family, &cand, t) {
                    if v <= value - 1e-4 * s * gnorm2 {
                        accepted = Some((cand, v));
                        break;
                    }
                }
            }
            s *= 0.5;
        }
        let Some((cand, v)) = accepted else {
            converged_step = true;
            break;
        };
        let moved = norm(
            &theta
                .iter()
                .zip(&cand)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        theta = cand;
        value = v;
        step = (s * 2.0).min(1e3);
        if moved < config.interval_tol {
            converged_step = true;
            break;
        }
    }
    let residual_norm = norm(&estimating_residual(table, family, &theta, t)?);
    Ok(EstimationResult {
        theta_hat: theta,
        objective_value: value,
        tuning: *t,
        converged: converged_step && residual_norm < config.residual_tol,
        iterations,
        residual_norm,
        sandwich_variance: None,
        experimental: true,
    })
}
