//! Asymptotic ingredients for minimum LSD estimators and LSD statistics.
//!
//! With `w_θ = B(θ) u_θ − A(θ)`, `A(θ) = Σ f^(1+β) u`, `B(θ) = Σ f^(1+β)`,
//! `δ_g = g/f_θ` and `K(δ) = δ^A − 1`:
//!
//! ```text
//! J_g = E_g[K'(δ_g) f^β w uᵀ] − Σ K(δ_g) f^(1+β) ∇w − (1+β) Σ K(δ_g) f^(1+β) w uᵀ
//! V_g = Var_g[K'(δ_g) f^β w]
//! ```
//!
//! and `√n(θ̂ − θ^g)` is asymptotically normal with covariance `J⁻¹ V J⁻ᵀ`.
//! At the model (`g = f_θ`) the two `K` terms vanish and
//! `J = A [B(θ) Σ f^(1+β) u uᵀ − A(θ) A(θ)ᵀ]`, `V = A² Var_f(f^β w)`.
//! These model matrices are the `J_β(θ)`, `K_β(θ)` of the test statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::divergence::{Degeneracy, DiscreteDensity, TuningPair};
use crate::error::{LsdError, Result};
use crate::models::{ln_pmf_on, ModelFamily, SUPPORT_EPS};
use crate::numeric::{fd_step, softmax};

/// `J` and `V` evaluated at one parameter and tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichMatrices {
    pub j_mat: DMatrix<f64>,
    pub v_mat: DMatrix<f64>,
    pub theta: Vec<f64>,
    pub tuning: TuningPair,
}

/// Null law `Σ ζ_i Z_i²` of an LSD statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadFormNull {
    /// Nonzero eigenvalues of `A J⁻¹ K J⁻¹`, decreasing.
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    pub a_mat: DMatrix<f64>,
}

/// Relative singular-value cutoff for ranks.
pub const RANK_TOL: f64 = 1e-9;

/// Largest condition number accepted for `J`.
pub const MAX_CONDITION: f64 = 1e12;

/// Per-cell model quantities on a working support.
struct ModelCells {
    ln_f: Vec<f64>,
    scores: Vec<DVector<f64>>,
    score_grads: Vec<DMatrix<f64>>,
}

impl ModelCells {
    fn new(family: &dyn ModelFamily, theta: &[f64], support: &[u64]) -> Self {
        ModelCells {
            ln_f: ln_pmf_on(family, theta, support),
            scores: support
                .iter()
                .map(|&x| DVector::from_vec(family.score(theta, x)))
                .collect(),
            score_grads: support
                .iter()
                .map(|&x| family.score_grad(theta, x))
                .collect(),
        }
    }
}

/// `B(θ)`, `A(θ)` and the weights `w_θ(x)` on the cells.
struct Weights {
    big_b: f64,
    big_a: DVector<f64>,
    f_pow: Vec<f64>,
    w: Vec<DVector<f64>>,
}

fn weights(cells: &ModelCells, beta: f64) -> Weights {
    let p = 1.0 + beta;
    let dim = cells.scores[0].len();
    let f_pow: Vec<f64> = cells.ln_f.iter().map(|l| (p * l).exp()).collect();
    let big_b: f64 = f_pow.iter().sum();
    let big_a = f_pow
        .iter()
        .zip(&cells.scores)
        .fold(DVector::zeros(dim), |acc, (fp, u)| acc + u * *fp);
    let w = cells.scores.iter().map(|u| u * big_b - &big_a).collect();
    Weights {
        big_b,
        big_a,
        f_pow,
        w,
    }
}

/// Union of `g`'s support and the model support truncated at `θ`, with `g`
/// padded by zeros.
fn aligned(g: &DiscreteDensity, family: &dyn ModelFamily, theta: &[f64]) -> (Vec<u64>, Vec<f64>) {
    let upper = family
        .support_upper(theta, SUPPORT_EPS)
        .max(g.support().last().copied().unwrap_or(0));
    let support: Vec<u64> = (0..=upper).collect();
    let mass = support.iter().map(|&x| g.mass_at(x)).collect();
    (support, mass)
}

fn check_inputs(family: &dyn ModelFamily, theta: &[f64], t: &TuningPair) -> Result<()> {
    family.check_theta(theta)?;
    if !t.a_positive() {
        return Err(t.degenerate("A <= 0: K'(δ) = A δ^(A−1) is unbounded"));
    }
    Ok(())
}

/// General three-term `J_g` at `θ` for a density `g`.
pub fn j_matrix(
    g: &DiscreteDensity,
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<DMatrix<f64>> {
    check_inputs(family, theta, t)?;
    let (support, g_mass) = aligned(g, family, theta);
    let cells = ModelCells::new(family, theta, &support);
    let wt = weights(&cells, t.beta());
    let p = 1.0 + t.beta();
    let (a, b) = (t.a_exp(), t.b_exp());
    let dim = theta.len();

    // ∇B(θ) = (1+β) A(θ),  ∇A(θ) = Σ f^(1+β) [(1+β) u uᵀ + ∇u]
    let grad_big_b = &wt.big_a * p;
    let mut grad_big_a = DMatrix::zeros(dim, dim);
    for ((fp, u), du) in wt.f_pow.iter().zip(&cells.scores).zip(&cells.score_grads) {
        grad_big_a += (u * u.transpose() * p + du) * *fp;
    }

    let mut first = DMatrix::zeros(dim, dim);
    let mut second = DMatrix::zeros(dim, dim);
    let mut third = DMatrix::zeros(dim, dim);
    for (i, &gm) in g_mass.iter().enumerate() {
        let u = &cells.scores[i];
        let w = &wt.w[i];
        // g K'(δ) f^β = A g^A f^B and K(δ) f^(1+β) = g^A f^B − f^(1+β)
        let ga_fb = if gm > 0.0 {
            (a * gm.ln() + b * cells.ln_f[i]).exp()
        } else {
            0.0
        };
        let k_f = ga_fb - wt.f_pow[i];
        let w_ut = w * u.transpose();
        first += &w_ut * (a * ga_fb);
        if k_f != 0.0 {
            let grad_w =
                u * grad_big_b.transpose() + &cells.score_grads[i] * wt.big_b - &grad_big_a;
            second += grad_w * k_f;
            third += w_ut * (p * k_f);
        }
    }
    Ok(first - second - third)
}

/// `V_g = Var_g[K'(δ_g) f^β w]`.
pub fn v_matrix(
    g: &DiscreteDensity,
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<DMatrix<f64>> {
    check_inputs(family, theta, t)?;
    let (support, g_mass) = aligned(g, family, theta);
    let cells = ModelCells::new(family, theta, &support);
    let wt = weights(&cells, t.beta());
    let a = t.a_exp();
    let dim = theta.len();
    let mut second_moment = DMatrix::zeros(dim, dim);
    let mut mean = DVector::zeros(dim);
    for (i, &gm) in g_mass.iter().enumerate() {
        if gm <= 0.0 {
            continue;
        }
        // z = A (g/f)^(A−1) f^β w
        let ln_scale = (a - 1.0) * (gm.ln() - cells.ln_f[i]) + t.beta() * cells.ln_f[i];
        let z = &wt.w[i] * (a * ln_scale.exp());
        mean += &z * gm;
        second_moment += &z * z.transpose() * gm;
    }
    Ok(second_moment - &mean * mean.transpose())
}

fn model_support(family: &dyn ModelFamily, theta: &[f64]) -> Vec<u64> {
    (0..=family.support_upper(theta, SUPPORT_EPS)).collect()
}

/// `J` at `g = f_θ`: `A [B(θ) Σ f^(1+β) u uᵀ − A(θ) A(θ)ᵀ]`.
pub fn model_j_matrix(
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<DMatrix<f64>> {
    check_inputs(family, theta, t)?;
    let cells = ModelCells::new(family, theta, &model_support(family, theta));
    let wt = weights(&cells, t.beta());
    let dim = theta.len();
    let mut outer = DMatrix::zeros(dim, dim);
    for (fp, u) in wt.f_pow.iter().zip(&cells.scores) {
        outer += u * u.transpose() * *fp;
    }
    Ok((outer * wt.big_b - &wt.big_a * wt.big_a.transpose()) * t.a_exp())
}

/// `V` at `g = f_θ`: `A² Var_f(f^β w)`.
pub fn model_v_matrix(
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<DMatrix<f64>> {
    check_inputs(family, theta, t)?;
    let cells = ModelCells::new(family, theta, &model_support(family, theta));
    let wt = weights(&cells, t.beta());
    let dim = theta.len();
    let mut second_moment = DMatrix::zeros(dim, dim);
    let mut mean = DVector::zeros(dim);
    for (i, lf) in cells.ln_f.iter().enumerate() {
        let f = lf.exp();
        let z = &wt.w[i] * (t.beta() * lf).exp();
        mean += &z * f;
        second_moment += &z * z.transpose() * f;
    }
    let a2 = t.a_exp() * t.a_exp();
    Ok((second_moment - &mean * mean.transpose()) * a2)
}

/// `J_β(θ)` and `K_β(θ)` at the model.
pub fn model_sandwich(
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<SandwichMatrices> {
    Ok(SandwichMatrices {
        j_mat: model_j_matrix(family, theta, t)?,
        v_mat: model_v_matrix(family, theta, t)?,
        theta: theta.to_vec(),
        tuning: *t,
    })
}

/// General `J_g`, `V_g` for a density `g` at `θ`.
pub fn sandwich_matrices(
    g: &DiscreteDensity,
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<SandwichMatrices> {
    Ok(SandwichMatrices {
        j_mat: j_matrix(g, family, theta, t)?,
        v_mat: v_matrix(g, family, theta, t)?,
        theta: theta.to_vec(),
        tuning: *t,
    })
}

fn checked_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(LsdError::SingularMatrix(format!(
            "{what} is not a nonempty square matrix"
        )));
    }
    let sv = m.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > 0.0) || !smax.is_finite() || smax / smin >= MAX_CONDITION {
        return Err(LsdError::SingularMatrix(format!(
            "{what} has condition number {:.3e}",
            smax / smin
        )));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| LsdError::SingularMatrix(format!("{what} is not invertible")))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `J⁻¹ V J⁻ᵀ`.
pub fn sandwich_variance(sm: &SandwichMatrices) -> Result<DMatrix<f64>> {
    let j_inv = checked_inverse(&sm.j_mat, "J")?;
    if sm.v_mat.shape() != sm.j_mat.shape() {
        return Err(LsdError::BadParameter("J and V shapes differ".into()));
    }
    Ok(symmetrize(&j_inv * &sm.v_mat * j_inv.transpose()))
}

/// Model-based sandwich covariance of `√n(θ̂ − θ)` at `θ`.
pub fn model_sandwich_variance(
    family: &dyn ModelFamily,
    theta: &[f64],
    t: &TuningPair,
) -> Result<DMatrix<f64>> {
    sandwich_variance(&model_sandwich(family, theta, t)?)
}

/// Fills `result.sandwich_variance` with the model-based sandwich at `θ̂`.
pub fn attach_sandwich(
    mut result: crate::estimation::EstimationResult,
    family: &dyn ModelFamily,
) -> Result<crate::estimation::EstimationResult> {
    let sigma = model_sandwich_variance(family, &result.theta_hat, &result.tuning)?;
    result.sandwich_variance = Some(sigma);
    Ok(result)
}

/// Gradient in `θ` of `LSD(f_θ, f_θ0)`.
///
/// Away from the singular lines this is
/// `((1+β)/B) [E_{f_θ^(1+β)}[u] − E_{f_θ^A f_θ0^B}[u]]`. At `B = 0` it is
/// `(1+β) Cov_{f_θ^(1+β)}(u, ln(f_θ/f_θ0))`, and at `A = 0` it is
/// `E_{f_θ^(1+β)}[u] − E_{f_θ0^(1+β)}[u]`.
pub fn lsd_gradient_first(
    family: &dyn ModelFamily,
    theta: &[f64],
    theta0: &[f64],
    t: &TuningPair,
) -> Result<Vec<f64>> {
    family.check_theta(theta)?;
    family.check_theta(theta0)?;
    let upper = family
        .support_upper(theta, SUPPORT_EPS)
        .max(family.support_upper(theta0, SUPPORT_EPS));
    let support: Vec<u64> = (0..=upper).collect();
    let lg = ln_pmf_on(family, theta, &support);
    let lf = ln_pmf_on(family, theta0, &support);
    let scores: Vec<Vec<f64>> = support.iter().map(|&x| family.score(theta, x)).collect();
    let p = 1.0 + t.beta();
    let w_g = softmax(&lg.iter().map(|l| p * l).collect::<Vec<_>>());
    let mean = |w: &[f64], j: usize| -> f64 { w.iter().zip(&scores).map(|(w, u)| w * u[j]).sum() };
    let dim = theta.len();
    let grad = match t.degeneracy() {
        Degeneracy::BZero => (0..dim)
            .map(|j| {
                let mu = mean(&w_g, j);
                let h: Vec<f64> = lg.iter().zip(&lf).map(|(a, b)| a - b).collect();
                let mh: f64 = w_g.iter().zip(&h).map(|(w, h)| w * h).sum();
                p * w_g
                    .iter()
                    .zip(&scores)
                    .zip(&h)
                    .map(|((w, u), h)| w * (u[j] - mu) * (h - mh))
                    .sum::<f64>()
            })
            .collect(),
        Degeneracy::AZero => {
            let w_f = softmax(&lf.iter().map(|l| p * l).collect::<Vec<_>>());
            (0..dim).map(|j| mean(&w_g, j) - mean(&w_f, j)).collect()
        }
        Degeneracy::None => {
            let (a, b) = (t.a_exp(), t.b_exp());
            let w_x = softmax(
                &lg.iter()
                    .zip(&lf)
                    .map(|(g, f)| a * g + b * f)
                    .collect::<Vec<_>>(),
            );
            (0..dim)
                .map(|j| p / b * (mean(&w_g, j) - mean(&w_x, j)))
                .collect()
        }
    };
    Ok(grad)
}

/// `LSD(f_θa, f_θb)` on the union of the two truncated supports.
pub fn model_lsd(
    family: &dyn ModelFamily,
    theta_a: &[f64],
    theta_b: &[f64],
    t: &TuningPair,
) -> Result<f64> {
    family.check_theta(theta_a)?;
    family.check_theta(theta_b)?;
    if theta_a == theta_b {
        return Ok(0.0);
    }
    let upper = family
        .support_upper(theta_a, SUPPORT_EPS)
        .max(family.support_upper(theta_b, SUPPORT_EPS));
    let support: Vec<u64> = (0..=upper).collect();
    let lg = ln_pmf_on(family, theta_a, &support);
    let lf = ln_pmf_on(family, theta_b, &support);
    Ok(crate::divergence::lsd_from_logs(&lg, &lf, t))
}

/// `A_β(θ0)`: Hessian of `θ ↦ LSD(f_θ, f_θ0)` at `θ0`, by central
/// differences of the analytic gradient.
pub fn a_matrix(family: &dyn ModelFamily, theta0: &[f64], t: &TuningPair) -> Result<DMatrix<f64>> {
    family.check_theta(theta0)?;
    // expansion preconditions: zero value and zero gradient at θ0
    let value = model_lsd(family, theta0, theta0, t)?;
    let grad0 = lsd_gradient_first(family, theta0, theta0, t)?;
    if value.abs() > 1e-10 || grad0.iter().any(|g| g.abs() > 1e-8) {
        return Err(LsdError::NoConvergence(format!(
            "LSD(f, f) = {value:e}, gradient {grad0:?}: expansion preconditions fail"
        )));
    }
    let dim = theta0.len();
    let bounds = family.param_bounds();
    let mut hess = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let (lo, hi) = bounds[j];
        let room = (theta0[j] - lo).min(hi - theta0[j]);
        let h = fd_step(theta0[j]).min(0.5 * room);
        if !(h > 1e-14) {
            return Err(LsdError::NoConvergence(format!(
                "differencing step underflows at parameter {j}"
            )));
        }
        let mut plus = theta0.to_vec();
        let mut minus = theta0.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let gp = lsd_gradient_first(family, &plus, theta0, t)?;
        let gm = lsd_gradient_first(family, &minus, theta0, t)?;
        for i in 0..dim {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    Ok(symmetrize(hess))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let smax = sv.max();
    if !(smax > 0.0) {
        return 0;
    }
    let cutoff = RANK_TOL * smax.max(1.0);
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Eigenvalues of `A Σ` with `Σ = J⁻¹ K J⁻ᵀ`, computed on the symmetric
/// `Σ^(1/2) A Σ^(1/2)`. The rank is that of `Σ A Σ`.
pub fn quadform_null(
    a_mat: &DMatrix<f64>,
    j_mat: &DMatrix<f64>,
    v_mat: &DMatrix<f64>,
) -> Result<QuadFormNull> {
    let sigma = sandwich_variance(&SandwichMatrices {
        j_mat: j_mat.clone(),
        v_mat: v_mat.clone(),
        theta: Vec::new(),
        tuning: TuningPair::new(0.0, 0.0)?,
    })?;
    if a_mat.shape() != sigma.shape() {
        return Err(LsdError::BadParameter("A and J shapes differ".into()));
    }
    let rank = numerical_rank(&(&sigma * a_mat * &sigma));
    let root = psd_sqrt(&sigma);
    let sym = symmetrize(&root * a_mat * &root);
    let mut eigs: Vec<f64> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eigs.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    eigs.truncate(rank);
    eigs.sort_by(|a, b| b.total_cmp(a));
    Ok(QuadFormNull {
        eigenvalues: eigs,
        rank,
        a_mat: a_mat.clone(),
    })
}

/// Null quadratic form of the one-sample statistic at `θ0`.
pub fn null_distribution(
    family: &dyn ModelFamily,
    theta0: &[f64],
    t: &TuningPair,
) -> Result<QuadFormNull> {
    let sm = model_sandwich(family, theta0, t)?;
    let a = a_matrix(family, theta0, t)?;
    quadform_null(&a, &sm.j_mat, &sm.v_mat)
}

/// Monte Carlo tail estimate for a chi-square mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureTail {
    pub pvalue: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Fewest draws accepted by the Monte Carlo mixture routines.
pub const MIN_DRAWS: usize = 100_000;

/// Default Monte Carlo draws.
pub const DEFAULT_DRAWS: usize = 1_000_000;

const STREAMS: u64 = 16;

fn check_mixture(eigs: &[f64], draws: usize) -> Result<()> {
    if eigs.is_empty() {
        return Err(LsdError::BadParameter("no eigenvalues".into()));
    }
    if eigs.iter().any(|e| !e.is_finite()) {
        return Err(LsdError::BadParameter("eigenvalues must be finite".into()));
    }
    if draws < MIN_DRAWS {
        return Err(LsdError::BadParameter(format!(
            "need at least {MIN_DRAWS} Monte Carlo draws, got {draws}"
        )));
    }
    Ok(())
}

/// Runs `draws` mixture samples split over fixed seeded streams; each stream
/// folds its samples with `f`.
fn mixture_streams<T, F>(eigs: &[f64], draws: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut dyn Iterator<Item = f64>) -> T + Sync,
{
    (0..STREAMS)
        .into_par_iter()
        .map(|s| {
            let count =
                draws / STREAMS as usize + usize::from((s as usize) < draws % STREAMS as usize);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
            let mut samples = (0..count).map(move |_| {
                eigs.iter()
                    .map(|&z| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        z * n * n
                    })
                    .sum::<f64>()
            });
            f(&mut samples)
        })
        .collect()
}

/// `P(Σ ζ_i Z_i² > observed)` by seeded Monte Carlo.
pub fn chisq_mixture_pvalue(
    eigs: &[f64],
    observed: f64,
    draws: usize,
    seed: u64,
) -> Result<MixtureTail> {
    check_mixture(eigs, draws)?;
    if !(observed >= 0.0) || !observed.is_finite() {
        return Err(LsdError::BadParameter(format!(
            "observed statistic must be finite and nonnegative, got {observed}"
        )));
    }
    let exceed: usize =
        mixture_streams(eigs, draws, seed, |it| it.filter(|&v| v > observed).count())
            .into_iter()
            .sum();
    let p = exceed as f64 / draws as f64;
    Ok(MixtureTail {
        pvalue: p,
        std_error: (p * (1.0 - p) / draws as f64).sqrt(),
        draws,
    })
}

/// Empirical `prob`-quantile of `Σ ζ_i Z_i²` by seeded Monte Carlo.
pub fn chisq_mixture_quantile(eigs: &[f64], prob: f64, draws: usize, seed: u64) -> Result<f64> {
    check_mixture(eigs, draws)?;
    if !(prob > 0.0 && prob < 1.0) {
        return Err(LsdError::BadParameter(format!(
            "probability must lie in (0, 1), got {prob}"
        )));
    }
    let mut all: Vec<f64> = mixture_streams(eigs, draws, seed, |it| it.collect::<Vec<f64>>())
        .into_iter()
        .flatten()
        .collect();
    all.sort_by(f64::total_cmp);
    let idx = ((prob * draws as f64).ceil() as usize).clamp(1, draws) - 1;
    Ok(all[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::derive_tuning;
    use crate::models::{geometric_family, model_density, poisson_family};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn fisher_information_at_zero_tuning() {
        let fam = poisson_family();
        let t = derive_tuning(0.0, 0.0).unwrap();
        let j = model_j_matrix(&fam, &[2.0], &t).unwrap();
        close(j[(0, 0)], 0.5, 1e-10);
        let s = model_sandwich_variance(&fam, &[2.0], &t).unwrap();
        close(s[(0, 0)], 2.0, 1e-9);
    }

    #[test]
    fn general_matrices_reduce_at_model() {
        for (fam, theta) in [
            (Box::new(poisson_family()) as Box<dyn ModelFamily>, 1.7),
            (Box::new(geometric_family()), 0.35),
        ] {
            for &(b, g) in &[(0.0, 0.0), (0.3, 0.5), (0.8, -0.4), (0.5, 1.0)] {
                let t = derive_tuning(b, g).unwrap();
                let support: Vec<u64> = (0..=fam.support_upper(&[theta], SUPPORT_EPS)).collect();
                let f = model_density(fam.as_ref(), &[theta], &support).unwrap();
                let jg = j_matrix(&f, fam.as_ref(), &[theta], &t).unwrap();
                let jm = model_j_matrix(fam.as_ref(), &[theta], &t).unwrap();
                let vg = v_matrix(&f, fam.as_ref(), &[theta], &t).unwrap();
                let vm = model_v_matrix(fam.as_ref(), &[theta], &t).unwrap();
                let scale = jm[(0, 0)].abs().max(1.0);
                close(jg[(0, 0)], jm[(0, 0)], 1e-10 * scale);
                close(vg[(0, 0)], vm[(0, 0)], 1e-10 * vm[(0, 0)].abs().max(1.0));
                assert!(vm[(0, 0)] > 0.0);
            }
        }
    }

    /// Independent term-by-term J_g on a three-point g for the Poisson family.
    fn brute_j(g: &[f64], theta: f64, beta: f64, gamma: f64) -> (f64, f64) {
        let t = derive_tuning(beta, gamma).unwrap();
        let (a, p) = (t.a_exp(), 1.0 + beta);
        let n = 80;
        let f: Vec<f64> = (0..n)
            .map(|x| poisson_family().pmf(&[theta], x as u64).unwrap())
            .collect();
        let u: Vec<f64> = (0..n).map(|x| x as f64 / theta - 1.0).collect();
        let du: Vec<f64> = (0..n).map(|x| -(x as f64) / (theta * theta)).collect();
        let gx = |x: usize| if x < g.len() { g[x] } else { 0.0 };
        let bb: f64 = (0..n).map(|x| f[x].powf(p)).sum();
        let aa: f64 = (0..n).map(|x| f[x].powf(p) * u[x]).sum();
        let dbb = p * aa;
        let daa: f64 = (0..n)
            .map(|x| f[x].powf(p) * (p * u[x] * u[x] + du[x]))
            .sum();
        let mut j = 0.0;
        let mut mean_z = 0.0;
        let mut m2 = 0.0;
        for x in 0..n {
            let w = bb * u[x] - aa;
            let dw = u[x] * dbb + bb * du[x] - daa;
            let delta = gx(x) / f[x];
            let k = delta.powf(a) - 1.0;
            if gx(x) > 0.0 {
                let kp = a * delta.powf(a - 1.0);
                j += gx(x) * w * u[x] * kp * f[x].powf(beta);
                let z = kp * f[x].powf(beta) * w;
                mean_z += gx(x) * z;
                m2 += gx(x) * z * z;
            }
            j -= k * f[x].powf(p) * dw;
            j -= p * k * f[x].powf(p) * w * u[x];
        }
        (j, m2 - mean_z * mean_z)
    }

    #[test]
    fn general_matrices_match_brute_force() {
        let g = [0.5, 0.3, 0.2];
        let dens = DiscreteDensity::on_range(g.to_vec()).unwrap();
        for &(b, gm, theta) in &[(0.3, 0.5, 0.9), (0.0, 0.0, 0.7), (0.6, -0.5, 1.2)] {
            let t = derive_tuning(b, gm).unwrap();
            let (jb, vb) = brute_j(&g, theta, b, gm);
            let j = j_matrix(&dens, &poisson_family(), &[theta], &t).unwrap();
            let v = v_matrix(&dens, &poisson_family(), &[theta], &t).unwrap();
            // the library truncates the model tail at 1e-12, the brute force does not
            close(j[(0, 0)], jb, 1e-9 * jb.abs().max(1.0));
            close(v[(0, 0)], vb, 1e-9 * vb.abs().max(1.0));
        }
    }

    #[test]
    fn point_mass_has_zero_variance() {
        let g = DiscreteDensity::on_range(vec![1.0]).unwrap();
        let t = derive_tuning(0.4, 0.2).unwrap();
        let v = v_matrix(&g, &poisson_family(), &[1.0], &t).unwrap();
        close(v[(0, 0)], 0.0, 1e-14);
    }

    #[test]
    fn sandwich_examples() {
        let t = derive_tuning(0.0, 0.0).unwrap();
        let sm = SandwichMatrices {
            j_mat: DMatrix::identity(2, 2),
            v_mat: DMatrix::identity(2, 2),
            theta: vec![],
            tuning: t,
        };
        assert_eq!(sandwich_variance(&sm).unwrap(), DMatrix::identity(2, 2));
        let sm = SandwichMatrices {
            j_mat: scalar(2.0),
            v_mat: scalar(8.0),
            theta: vec![],
            tuning: t,
        };
        close(sandwich_variance(&sm).unwrap()[(0, 0)], 2.0, 1e-15);
        let sm = SandwichMatrices {
            j_mat: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            v_mat: DMatrix::identity(2, 2),
            theta: vec![],
            tuning: t,
        };
        assert!(matches!(
            sandwich_variance(&sm),
            Err(LsdError::SingularMatrix(_))
        ));
    }

    #[test]
    fn a_matrix_is_gamma_invariant_and_matches_closed_form() {
        let fam = poisson_family();
        let mats: Vec<f64> = [-0.5, 0.0, 1.0]
            .iter()
            .map(|&g| a_matrix(&fam, &[2.0], &derive_tuning(0.0, g).unwrap()).unwrap()[(0, 0)])
            .collect();
        for m in &mats {
            close(*m, mats[0], 1e-6);
            // (1+β) Var_{f^(1+β)}(u) = 1/θ at β = 0
            close(*m, 0.5, 1e-6);
        }
    }

    #[test]
    fn a_matrix_matches_value_hessian() {
        let fam = geometric_family();
        let t = derive_tuning(0.5, 0.3).unwrap();
        let theta0 = 0.5;
        let a = a_matrix(&fam, &[theta0], &t).unwrap()[(0, 0)];
        let h = 1e-3;
        let v = |x: f64| model_lsd(&fam, &[x], &[theta0], &t).unwrap();
        let fd = (v(theta0 + h) - 2.0 * v(theta0) + v(theta0 - h)) / (h * h);
        close(a, fd, 1e-4 * a.abs().max(1.0));
    }

    #[test]
    fn lsd_gradient_matches_value_differences() {
        let fam = poisson_family();
        for &(b, g) in &[(0.2, 0.0), (0.0, 0.0), (0.0, -1.0), (0.4, 0.7), (0.3, -1.2)] {
            let t = derive_tuning(b, g).unwrap();
            let (theta, theta0) = (1.5, 1.0);
            let grad = lsd_gradient_first(&fam, &[theta], &[theta0], &t).unwrap()[0];
            let h = 1e-5;
            let fd = (model_lsd(&fam, &[theta + h], &[theta0], &t).unwrap()
                - model_lsd(&fam, &[theta - h], &[theta0], &t).unwrap())
                / (2.0 * h);
            close(grad, fd, 1e-6 * grad.abs().max(1.0));
        }
    }

    #[test]
    fn quadform_examples() {
        let q = quadform_null(&scalar(3.0), &scalar(2.0), &scalar(8.0)).unwrap();
        assert_eq!(q.rank, 1);
        close(q.eigenvalues[0], 6.0, 1e-12);

        let q = quadform_null(&scalar(0.0), &scalar(2.0), &scalar(8.0)).unwrap();
        assert_eq!(q.rank, 0);
        assert!(q.eigenvalues.is_empty());
    }

    #[test]
    fn quadform_matches_dense_nonsymmetric_eigensolver() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let j = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let v = DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 2.0]);
        let q = quadform_null(&a, &j, &v).unwrap();
        let ji = j.clone().try_inverse().unwrap();
        let sigma = &ji * &v * ji.transpose();
        // eigenvalues of the 2×2 product from its characteristic polynomial
        let m = &a * &sigma;
        let tr = m.trace();
        let det = m.determinant();
        let disc = (tr * tr - 4.0 * det).sqrt();
        let mut expect = [(tr + disc) / 2.0, (tr - disc) / 2.0];
        expect.sort_by(|x, y| y.total_cmp(x));
        assert_eq!(q.rank, 2);
        close(q.eigenvalues[0], expect[0], 1e-10);
        close(q.eigenvalues[1], expect[1], 1e-10);
    }

    #[test]
    fn mixture_pvalue_known_quantiles() {
        let draws = 400_000;
        let r = chisq_mixture_pvalue(&[1.0], 3.841_458_820_694_124, draws, 7).unwrap();
        assert!((r.pvalue - 0.05).abs() < 4.0 * r.std_error, "{r:?}");
        assert!(r.std_error <= 0.5 / (draws as f64).sqrt());
        let r = chisq_mixture_pvalue(&[2.0], 2.0 * 3.841_458_820_694_124, draws, 8).unwrap();
        assert!((r.pvalue - 0.05).abs() < 4.0 * r.std_error);
        let r = chisq_mixture_pvalue(&[1.0, 1.0], 5.991_464_547_107_979, draws, 9).unwrap();
        assert!((r.pvalue - 0.05).abs() < 4.0 * r.std_error);
    }

    #[test]
    fn mixture_scaled_chi_square_tail() {
        let chi = ChiSquared::new(1.0).unwrap();
        for &(c, x) in &[(0.7, 0.5), (2.5, 4.0), (1.3, 10.0)] {
            let r = chisq_mixture_pvalue(&[c], x, 200_000, 11).unwrap();
            let exact = 1.0 - chi.cdf(x / c);
            assert!(
                (r.pvalue - exact).abs() <= 3.0 * r.std_error.max(1e-6),
                "{c} {x}"
            );
        }
    }

    #[test]
    fn mixture_is_seed_reproducible() {
        let a = chisq_mixture_pvalue(&[1.0, 0.4], 2.0, 150_000, 3).unwrap();
        let b = chisq_mixture_pvalue(&[1.0, 0.4], 2.0, 150_000, 3).unwrap();
        assert_eq!(a, b);
        let q = chisq_mixture_quantile(&[1.0], 0.95, 400_000, 5).unwrap();
        close(q, 3.841_458_820_694_124, 0.05);
    }

    #[test]
    fn mixture_rejects_bad_input() {
        assert!(chisq_mixture_pvalue(&[], 1.0, MIN_DRAWS, 0).is_err());
        assert!(chisq_mixture_pvalue(&[1.0], -1.0, MIN_DRAWS, 0).is_err());
        assert!(chisq_mixture_pvalue(&[1.0], 1.0, 10, 0).is_err());
        assert!(chisq_mixture_quantile(&[1.0], 1.0, MIN_DRAWS, 0).is_err());
    }
}
