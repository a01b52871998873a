use proptest::prelude::*;

use lsd_core::asymptotics::{model_sandwich, null_distribution};
use lsd_core::divergence::{
    ldpd_divergence, lpd_divergence, lsd_divergence, pd_divergence, DiscreteDensity,
};
use lsd_core::io::{format_counts, parse_counts};
use lsd_core::models::truncated_support;
use lsd_core::testing::{
    one_sample_test, pooled_estimate, signed_two_sample_test, PValueConvention, TestOptions,
};
use lsd_core::{
    derive_tuning, geometric_family, minimize_lsd, poisson_family, EstimatorConfig, FrequencyTable,
    ModelFamily,
};

/// Strictly positive probability vector of length `k`.
fn density(k: usize) -> impl Strategy<Value = DiscreteDensity> {
    prop::collection::vec(0.05f64..1.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        DiscreteDensity::on_range(w.iter().map(|v| v / s).collect()).unwrap()
    })
}

fn density_pair() -> impl Strategy<Value = (DiscreteDensity, DiscreteDensity)> {
    (2usize..8).prop_flat_map(|k| (density(k), density(k)))
}

fn table() -> impl Strategy<Value = FrequencyTable> {
    prop::collection::btree_map(0u64..40, 1u64..500, 1..12)
        .prop_map(|m| FrequencyTable::from_counts(m).unwrap())
}

fn families() -> Vec<Box<dyn ModelFamily>> {
    vec![Box::new(geometric_family()), Box::new(poisson_family())]
}

fn theta_for(family: &dyn ModelFamily, u: f64) -> f64 {
    match family.name() {
        "geometric" => 0.05 + 0.9 * u,
        _ => 0.2 + 8.0 * u,
    }
}

fn quick_opts() -> TestOptions {
    TestOptions {
        draws: 100_000,
        ..TestOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn beta_zero_is_lpd(
        (g, f) in density_pair(),
        lam in prop_oneof![-0.9f64..2.0, -1e-3f64..1e-3],
    ) {
        let lsd = lsd_divergence(&g, &f, &derive_tuning(0.0, lam).unwrap()).unwrap();
        prop_assert!((lsd - lpd_divergence(&g, &f, lam).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn gamma_zero_is_ldpd(
        (g, f) in density_pair(),
        beta in prop_oneof![0.0f64..1.0, 1e-9f64..1e-3],
    ) {
        let lsd = lsd_divergence(&g, &f, &derive_tuning(beta, 0.0).unwrap()).unwrap();
        prop_assert!((lsd - ldpd_divergence(&g, &f, beta).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn lpd_is_log_of_pd(
        (g, f) in density_pair(),
        lam in prop_oneof![-0.9f64..2.0, -1e-3f64..1e-3],
    ) {
        let c = lam * (lam + 1.0);
        prop_assume!(c.abs() > 1e-9);
        let lpd = lpd_divergence(&g, &f, lam).unwrap();
        let pd = pd_divergence(&g, &f, lam).unwrap();
        prop_assert!((lpd - (c * pd).ln_1p() / c).abs() <= 1e-12);
    }

    #[test]
    fn lsd_nonnegative(
        (g, f) in density_pair(),
        beta in 0.0f64..=1.0,
        gamma in -0.9f64..2.0,
    ) {
        let t = derive_tuning(beta, gamma).unwrap();
        prop_assume!(t.a_positive());
        prop_assert!(lsd_divergence(&g, &f, &t).unwrap() >= -1e-10);
        prop_assert!(lsd_divergence(&g, &g, &t).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn exponents_sum_to_one_plus_beta(beta in 0.0f64..=1.0, gamma in -0.9f64..2.0) {
        let t = derive_tuning(beta, gamma).unwrap();
        prop_assert_eq!(t.a_exp() + t.b_exp(), 1.0 + beta);
    }

    #[test]
    fn continuous_through_b_zero((g, f) in density_pair(), beta in 0.05f64..0.9) {
        let at = |b: f64| {
            let gamma = (beta - b) / (1.0 - beta);
            lsd_divergence(&g, &f, &derive_tuning(beta, gamma).unwrap()).unwrap()
        };
        let l0 = at(0.0);
        prop_assert!((at(1e-5) - l0).abs() <= 1e-4);
        prop_assert!((at(-1e-5) - l0).abs() <= 1e-4);
    }

    #[test]
    fn counts_round_trip(t in table()) {
        let text = format_counts(&t);
        prop_assert_eq!(parse_counts(text.as_bytes()).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn score_has_mean_zero(u in 0.0f64..1.0) {
        for fam in families() {
            let theta = [theta_for(fam.as_ref(), u)];
            // the score grows linearly in x, so the 1e-12 default tail would
            // leave ~1e-9 of mean at small geometric theta
            let support = truncated_support(fam.as_ref(), &theta, 1e-14).unwrap();
            let mut total = 0.0;
            let mut mean = 0.0;
            for &x in &support {
                let p = fam.pmf(&theta, x).unwrap();
                total += p;
                mean += p * fam.score(&theta, x)[0];
            }
            prop_assert!(total >= 1.0 - 1e-10);
            prop_assert!(mean.abs() <= 1e-10, "{} theta={theta:?} mean={mean}", fam.name());
        }
    }

    #[test]
    fn score_matches_log_pmf_difference(u in 0.0f64..1.0, x in 0u64..30) {
        for fam in families() {
            let th = theta_for(fam.as_ref(), u);
            let h = 1e-6 * (1.0 + th);
            let fd = (fam.ln_pmf(&[th + h], x) - fam.ln_pmf(&[th - h], x)) / (2.0 * h);
            let s = fam.score(&[th], x)[0];
            prop_assert!((s - fd).abs() <= 1e-6 * s.abs().max(1.0));
            let fd2 = (fam.score(&[th + h], x)[0] - fam.score(&[th - h], x)[0]) / (2.0 * h);
            let sg = fam.score_grad(&[th], x)[(0, 0)];
            prop_assert!((sg - fd2).abs() <= 1e-5 * sg.abs().max(1.0));
        }
    }

    #[test]
    fn sandwich_symmetric_and_psd(u in 0.0f64..1.0, beta in 0.0f64..=1.0, gamma in -0.5f64..1.5) {
        let t = derive_tuning(beta, gamma).unwrap();
        prop_assume!(t.a_positive());
        for fam in families() {
            let theta = [theta_for(fam.as_ref(), u)];
            let sm = model_sandwich(fam.as_ref(), &theta, &t).unwrap();
            prop_assert!((&sm.j_mat - sm.j_mat.transpose()).amax() <= 1e-10);
            prop_assert!((&sm.v_mat - sm.v_mat.transpose()).amax() <= 1e-10);
            prop_assert!(sm.v_mat.symmetric_eigenvalues().min() >= -1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn null_eigenvalues_depend_on_beta_only(u in 0.0f64..1.0, beta in 0.0f64..=1.0) {
        for fam in families() {
            let theta = [theta_for(fam.as_ref(), u)];
            let base = null_distribution(fam.as_ref(), &theta, &derive_tuning(beta, 0.0).unwrap())
                .unwrap();
            prop_assert_eq!(base.eigenvalues.len(), base.rank);
            prop_assert!(base.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            for gamma in [-0.5, 1.0] {
                let q = null_distribution(fam.as_ref(), &theta, &derive_tuning(beta, gamma).unwrap())
                    .unwrap();
                prop_assert_eq!(q.rank, base.rank);
                for (a, b) in q.eigenvalues.iter().zip(&base.eigenvalues) {
                    prop_assert!((a - b).abs() <= 1e-6, "{} beta={beta} gamma={gamma}", fam.name());
                }
            }
        }
    }

    #[test]
    fn one_sample_statistic_vanishes_at_estimate(
        t in table(),
        beta in 0.0f64..=1.0,
        gamma in 0.0f64..1.0,
    ) {
        let fam = poisson_family();
        let tp = derive_tuning(beta, gamma).unwrap();
        let fit = minimize_lsd(&t, &fam, &tp, &EstimatorConfig::default()).unwrap();
        let at_fit = one_sample_test(&t, &fam, &fit.theta_hat, &tp, 0.05, &quick_opts()).unwrap();
        prop_assert!(at_fit.statistic.abs() <= 1e-12);
        let off = [fit.theta_hat[0] * 1.5 + 0.1];
        let away = one_sample_test(&t, &fam, &off, &tp, 0.05, &quick_opts()).unwrap();
        prop_assert!(away.statistic > 0.0);
        prop_assert!((0.0..=1.0).contains(&away.pvalue));
    }

    #[test]
    fn pooling_a_table_with_itself_changes_nothing(
        t in table(),
        beta in 0.0f64..=1.0,
        gamma in -0.5f64..1.0,
    ) {
        let fam = poisson_family();
        let tp = derive_tuning(beta, gamma).unwrap();
        prop_assume!(tp.a_positive());
        let cfg = EstimatorConfig::default();
        let single = minimize_lsd(&t, &fam, &tp, &cfg).unwrap();
        let pooled = pooled_estimate(&t, &t, &fam, &tp, &cfg).unwrap();
        prop_assert_eq!(single.theta_hat, pooled.theta_hat);
    }

    /// Zero-heavy tables on {0..6}: raising every cell 1..=6 moves mass upward,
    /// which is the direction the ladder is meant to probe.
    #[test]
    fn signed_pvalue_falls_as_treated_counts_grow(
        zeros in 50u64..200,
        upper in prop::collection::vec(0u64..10, 6),
        beta in 0.0f64..=1.0,
        gamma in 0.0f64..1.0,
    ) {
        let fam = poisson_family();
        let tp = derive_tuning(beta, gamma).unwrap();
        let cfg = EstimatorConfig::default();
        let cells = |bump: u64| {
            let mut pairs = vec![(0u64, zeros)];
            pairs.extend(upper.iter().enumerate().map(|(i, &c)| (i as u64 + 1, c + bump)));
            FrequencyTable::from_counts(pairs).unwrap()
        };
        let control = cells(0);
        let mut last = f64::INFINITY;
        for step in 0..4u64 {
            let r = signed_two_sample_test(
                &control, &cells(2 * step), &fam, &tp, 0.05, PValueConvention::SignedRoot, &cfg,
            )
            .unwrap();
            prop_assert!(r.pvalue <= last + 1e-9, "step {step}: {} after {last}", r.pvalue);
            last = r.pvalue;
        }
    }
}
