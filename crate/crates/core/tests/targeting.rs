use dltmle_core::data::{OutcomeMode, OutcomeScaler};
use dltmle_core::dgp::{exact_truth, gen_tabular_micro, MicroOracle};
use dltmle_core::targeting::{
    clever_covariates, eif, estimate, partial_loss, partial_loss_derivative, seq_targeting,
    td_targeting, unscale_result, Epsilon, DEFAULT_MAX_ITER,
};
use dltmle_core::{EstimateResult, Method, PolicySpec, Truncation};

fn oracle_setup(n: usize, seed: u64) -> (dltmle_core::Batch, dltmle_core::FitOutputs, f64) {
    let g = PolicySpec::always_treat();
    let batch = gen_tabular_micro(n, seed).unwrap();
    let fit = MicroOracle::new(g.clone()).fit_outputs(&batch).unwrap();
    (batch, fit, exact_truth(&g).psi0)
}

#[test]
fn eif_is_mean_zero_at_the_truth() {
    let (batch, fit, psi0) = oracle_setup(50_000, 21);
    let cc = clever_covariates(&batch, &fit, Truncation::None).unwrap();
    let d = eif(&fit, &cc, &[0.0, 0.0], psi0, OutcomeMode::Survival).unwrap();
    let n = d.d_star.len() as f64;
    let mean = d.mean();
    let sd = (d.d_star.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(
        mean.abs() <= 3.0 * sd / n.sqrt(),
        "P_n D* = {mean}, sd {sd}"
    );
}

#[test]
fn oracle_fit_needs_almost_no_fluctuation() {
    let (batch, fit, psi0) = oracle_setup(50_000, 22);
    let cc = clever_covariates(&batch, &fit, Truncation::None).unwrap();
    let td = td_targeting(&batch, &fit, &cc, DEFAULT_MAX_ITER).unwrap();
    assert!(
        td.result.epsilon.first().abs() <= 0.05,
        "{:?}",
        td.result.epsilon
    );
    assert!(td.result.certificate);
    assert!((td.result.psi_hat - psi0).abs() <= 3.0 * td.result.sigma_hat);
    let seq = seq_targeting(&batch, &fit, &cc).unwrap();
    let Epsilon::PerTime(eps) = &seq.result.epsilon else {
        panic!("sequential targeting reports one fluctuation per step");
    };
    assert!(eps.iter().all(|e| e.abs() <= 0.05), "{eps:?}");
}

#[test]
fn partial_loss_is_stationary_up_to_the_stopping_rule() {
    let (batch, mut fit, _) = oracle_setup(4000, 23);
    for row in fit.q_hat.iter_mut() {
        for q in row.iter_mut() {
            *q = (*q * 1.3).min(0.95);
        }
    }
    let cc = clever_covariates(&batch, &fit, Truncation::None).unwrap();
    let td = td_targeting(&batch, &fit, &cc, DEFAULT_MAX_ITER).unwrap();
    let e = td.result.epsilon.first();
    assert!(e.abs() > 1e-3, "the distortion should need a fluctuation");
    assert!(td.result.certificate);
    // The derivative in the Q fluctuation equals -P_n D*, which the
    // stopping rule bounds.
    let slope = partial_loss_derivative(&fit, &cc, e);
    assert!(
        slope.abs() <= td.result.pn_dstar + 1e-8,
        "{slope} vs {}",
        td.result.pn_dstar
    );
    assert!(td.fd_error.unwrap() <= 1e-5);
    let base = partial_loss(&fit, &cc, 0.0, 0.0);
    assert!(partial_loss(&fit, &cc, e, e) < base);
}

#[test]
fn quantile_truncation_caps_weights() {
    let (batch, fit, _) = oracle_setup(3000, 24);
    let full = clever_covariates(&batch, &fit, Truncation::None).unwrap();
    let capped = clever_covariates(&batch, &fit, Truncation::Quantile(0.9)).unwrap();
    assert!(capped.max_weight <= full.max_weight);
    assert!(capped.truncated > 0);
    let one = clever_covariates(&batch, &fit, Truncation::Quantile(1.0)).unwrap();
    assert_eq!(one.i_t, full.i_t);
    assert!(clever_covariates(&batch, &fit, Truncation::Quantile(1.5)).is_err());
}

#[test]
fn glm_method_is_not_a_targeting_step() {
    let (batch, fit, _) = oracle_setup(100, 25);
    assert!(estimate(&batch, &fit, Method::LtmleGlm, Truncation::None).is_err());
    let p = estimate(&batch, &fit, Method::Plugin, Truncation::None).unwrap();
    assert_eq!(p.result.epsilon, Epsilon::Common(0.0));
    assert_eq!(p.result.iterations, 0);
}

#[test]
fn unscaling_keeps_the_interval_consistent() {
    let r = EstimateResult {
        psi_hat: 0.25,
        sigma_hat: 0.01,
        ci: [0.25 - 0.0196, 0.25 + 0.0196],
        epsilon: Epsilon::Common(0.1),
        pn_dstar: 0.001,
        certificate: true,
        iterations: 2,
    };
    let s = OutcomeScaler::new(-2.0, 2.0).unwrap();
    let u = unscale_result(&r, &s);
    assert!((u.psi_hat - -1.0).abs() <= 1e-12);
    assert!((u.sigma_hat - 0.04).abs() <= 1e-12);
    assert!((u.ci[1] - u.ci[0] - 2.0 * 1.96 * 0.04).abs() <= 1e-12);
    assert!((u.pn_dstar - 0.004).abs() <= 1e-12);
    assert_eq!((u.certificate, u.iterations), (true, 2));
}

#[test]
fn result_json_has_the_documented_keys() {
    let (batch, fit, _) = oracle_setup(500, 26);
    let t = estimate(&batch, &fit, Method::Td, Truncation::None).unwrap();
    let v: serde_json::Value = serde_json::to_value(&t.result).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        [
            "certificate",
            "ci",
            "epsilon",
            "iterations",
            "pn_dstar",
            "psi_hat",
            "sigma_hat"
        ]
    );
    assert!(v["epsilon"].is_number());
    let s = estimate(&batch, &fit, Method::Seq, Truncation::None).unwrap();
    let v: serde_json::Value = serde_json::to_value(&s.result).unwrap();
    assert_eq!(v["epsilon"].as_array().unwrap().len(), 2);
    let back: EstimateResult = serde_json::from_value(v).unwrap();
    assert!((back.psi_hat - s.result.psi_hat).abs() <= 1e-15);
    assert_eq!(back.certificate, s.result.certificate);
}
