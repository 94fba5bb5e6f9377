use proptest::prelude::*;

use dltmle_core::autodiff::Tape;
use dltmle_core::data::{apply_policy, OutcomeScaler, PolicySpec};
use dltmle_core::dgp::{gen_tabular_micro, MicroOracle};
use dltmle_core::gradcheck::{causal_mask_check, primitive_suite};
use dltmle_core::harness::metrics;
use dltmle_core::targeting::{
    clever_covariates, fluctuate, seq_targeting, solve_fluctuation, td_targeting, FluctuationData,
    DEFAULT_MAX_ITER,
};
use dltmle_core::{FitOutputs, Tensor, Truncation};

/// Oracle micro nuisances shifted on the logit scale, so targeting has work to do.
fn distorted_micro(n: usize, seed: u64, shift: f64) -> (dltmle_core::Batch, FitOutputs) {
    let batch = gen_tabular_micro(n, seed).unwrap();
    let mut fit = MicroOracle::new(PolicySpec::always_treat())
        .fit_outputs(&batch)
        .unwrap();
    for i in 0..fit.n() {
        for t in 0..fit.tau() {
            let s = shift * if (i + t) % 2 == 0 { 1.0 } else { -0.5 };
            fit.q_hat[i][t] = fluctuate(fit.q_hat[i][t], s);
            if t < fit.stop[i] {
                fit.v_hat[i][t] = fluctuate(fit.v_hat[i][t], s);
            }
        }
    }
    (batch, fit)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fluctuate_zero_is_identity(q in 1e-6f64..1.0 - 1e-6) {
        prop_assert_eq!(fluctuate(q, 0.0), q);
    }

    #[test]
    fn fluctuate_composes(q in 0.01f64..0.99, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let two = fluctuate(fluctuate(q, a), b);
        let one = fluctuate(q, a + b);
        prop_assert!((two - one).abs() <= 1e-12, "{} vs {}", two, one);
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        width in 1usize..7,
        seed in any::<u64>(),
        masked in prop::collection::vec(any::<bool>(), 7),
    ) {
        let mut x = seed;
        let data: Vec<f64> = (0..rows * width)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 20.0
            })
            .collect();
        // Keep the first column so no row is fully masked.
        let mask: Vec<f64> = (0..width)
            .map(|j| if j > 0 && masked[j] { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![rows, width], data).unwrap());
        let m = Tensor::new(vec![width], mask.clone()).unwrap();
        let s = tape.softmax(v, Some(&m)).unwrap();
        for row in tape.value(s).data().chunks(width) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (p, mk) in row.iter().zip(&mask) {
                if *mk == f64::NEG_INFINITY {
                    prop_assert_eq!(*p, 0.0);
                }
            }
        }
    }

    #[test]
    fn metrics_are_bounded(
        est in prop::collection::vec((-1.0f64..1.0, 0.0f64..0.5), 1..40),
        psi0 in -1.0f64..1.0,
    ) {
        let triples: Vec<_> = est.iter().map(|&(p, h)| (p, p - h, p + h)).collect();
        let (bias, rmse, coverage) = metrics(&triples, psi0);
        prop_assert!((0.0..=1.0).contains(&coverage));
        prop_assert!(rmse * rmse >= bias * bias - 1e-12);
    }

    #[test]
    fn scaler_round_trips_estimates(
        lo in -5.0f64..5.0,
        width in 0.1f64..10.0,
        psi in 0.0f64..1.0,
        sigma in 0.0f64..1.0,
    ) {
        let s = OutcomeScaler::new(lo, lo + width).unwrap();
        let (p, sd) = s.unscale_estimate(psi, sigma);
        prop_assert!((s.scale(p) - psi).abs() <= 1e-10);
        prop_assert!((sd / width - sigma).abs() <= 1e-10);
        prop_assert!((s.unscale(s.scale(p)) - p).abs() <= 1e-12 * (1.0 + p.abs()));
    }

    #[test]
    fn fluctuation_step_does_not_increase_loss(
        pts in prop::collection::vec((0.02f64..0.98, 0.0f64..1.0, 0.0f64..5.0), 2..40),
    ) {
        let mut d = FluctuationData::default();
        for &(q, y, w) in &pts {
            d.push(q, y, w);
        }
        let e = solve_fluctuation(&d);
        prop_assert!(d.loss(e) <= d.loss(0.0) + 1e-12);
        if d.info(e) > 1e-8 {
            prop_assert!(d.score(e).abs() <= 1e-7 * (1.0 + d.info(e)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn primitive_gradients_match_finite_differences(seed in any::<u64>()) {
        for c in primitive_suite(seed).unwrap() {
            prop_assert!(c.passed(), "{} {:e}", c.name, c.value);
        }
    }

    #[test]
    fn causal_mask_is_bit_exact(seed in any::<u64>()) {
        let (tested, violations) = causal_mask_check(seed).unwrap();
        prop_assert!(tested > 0);
        prop_assert_eq!(violations, 0);
    }

    #[test]
    fn clever_covariates_vanish_off_policy(seed in any::<u64>()) {
        let (batch, fit) = distorted_micro(300, seed, 0.3);
        let cc = clever_covariates(&batch, &fit, Truncation::None).unwrap();
        for (i, traj) in batch.trajectories.iter().enumerate() {
            let mut zero = false;
            for t in 0..batch.tau() {
                let w = cc.i_t[i][t];
                prop_assert!(w.is_finite() && w >= 0.0);
                if t < traj.stop && traj.a[t] != fit.policy_actions[i][t] {
                    zero = true;
                }
                if zero || t >= traj.stop {
                    prop_assert_eq!(w, 0.0);
                }
            }
        }
    }

    #[test]
    fn infinite_threshold_changes_nothing(seed in any::<u64>()) {
        let (batch, fit) = distorted_micro(300, seed, 0.4);
        let a = clever_covariates(&batch, &fit, Truncation::None).unwrap();
        let b = clever_covariates(&batch, &fit, Truncation::Threshold(f64::INFINITY)).unwrap();
        prop_assert_eq!(&a, &b);
        let ta = td_targeting(&batch, &fit, &a, DEFAULT_MAX_ITER).unwrap();
        let tb = td_targeting(&batch, &fit, &b, DEFAULT_MAX_ITER).unwrap();
        prop_assert_eq!(ta, tb);
    }

    #[test]
    fn td_certificate_and_derivative_identity(seed in any::<u64>(), shift in 0.0f64..0.8) {
        let (batch, fit) = distorted_micro(1500, seed, shift);
        let cc = clever_covariates(&batch, &fit, Truncation::None).unwrap();
        let out = td_targeting(&batch, &fit, &cc, DEFAULT_MAX_ITER).unwrap();
        let r = &out.result;
        let n = batch.n() as f64;
        if r.certificate {
            prop_assert!(r.pn_dstar < r.sigma_hat / n.ln());
        }
        prop_assert!((r.ci[0] - (r.psi_hat - 1.96 * r.sigma_hat)).abs() <= 1e-15);
        prop_assert!((r.ci[1] - (r.psi_hat + 1.96 * r.sigma_hat)).abs() <= 1e-15);
        prop_assert!(out.fd_error.unwrap() <= 1e-5, "fd error {:e}", out.fd_error.unwrap());
    }

    #[test]
    fn seq_first_order_conditions(seed in any::<u64>(), shift in 0.0f64..0.8) {
        let (batch, fit) = distorted_micro(1500, seed, shift);
        let cc = clever_covariates(&batch, &fit, Truncation::None).unwrap();
        let out = seq_targeting(&batch, &fit, &cc).unwrap();
        for s in &out.step_scores {
            prop_assert!(s.abs() <= 1e-8, "step score {:e}", s);
        }
    }

    #[test]
    fn apply_policy_is_idempotent(seed in any::<u64>(), window in 1usize..4) {
        let spec = dltmle_core::DgpSpec::complex(6, 3, window);
        let batch = dltmle_core::dgp::generate(&spec, 40, seed).unwrap();
        for g in [
            PolicySpec::always_treat(),
            PolicySpec::never_treat(),
            PolicySpec::dgp_threshold(window),
            PolicySpec::replay(),
        ] {
            for traj in &batch.trajectories {
                let once = apply_policy(traj, &g).unwrap();
                let mut t2 = traj.clone();
                t2.a = once.clone();
                prop_assert_eq!(apply_policy(&t2, &g).unwrap(), once);
            }
        }
    }
}
