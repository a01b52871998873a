//! Small numerical helpers shared by the divergence and estimation code.

/// `ln(x)` with `ln(0) = -inf`.
#[inline]
pub(crate) fn ln0(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Max-shifted `ln Σ exp(t_i)`. Returns `-inf` for an empty or all `-inf` input.
pub(crate) fn log_sum_exp<I>(terms: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let terms: Vec<f64> = terms.into_iter().collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Normalized weights `exp(t_i - lse(t))`.
pub(crate) fn softmax(log_weights: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_weights.iter().copied());
    log_weights.iter().map(|&t| (t - lse).exp()).collect()
}

/// Weighted mean of `values` under weights `exp(log_weights)`, ignoring
/// cells whose weight is exactly zero.
pub(crate) fn weighted_mean(log_weights: &[f64], values: &[f64]) -> f64 {
    softmax(log_weights)
        .iter()
        .zip(values)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, v)| w * v)
        .sum()
}

/// `ln Σ w_i exp(s v_i)` for weights `w = softmax(log_weights)`, via `ln_1p`
/// of `Σ w_i expm1(s v_i)` so that small `s` keeps full relative accuracy.
/// Zero-weight cells are skipped.
pub(crate) fn ln_mean_exp(log_weights: &[f64], values: &[f64], s: f64) -> f64 {
    let w = softmax(log_weights);
    let x: f64 = w
        .iter()
        .zip(values)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, v)| w * (s * v).exp_m1())
        .sum();
    if x.is_finite() && x.abs() < 0.5 {
        return x.ln_1p();
    }
    log_sum_exp(
        w.iter()
            .zip(values)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, v)| w.ln() + s * v),
    )
}

/// Relative central-difference step for parameter `x`.
#[inline]
pub(crate) fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}
