use std::collections::HashMap;

use dltmle_core::data::{read_dataset, validate, write_dataset};
use dltmle_core::dgp::{exact_truth, generate, micro, monte_carlo_truth, ComplexParams};
use dltmle_core::{DgpKind, DgpSpec, PolicySpec};

fn all_specs() -> Vec<DgpSpec> {
    vec![
        DgpSpec::simple_continuous(10),
        DgpSpec::simple_survival(10),
        DgpSpec::complex(10, 5, 1),
        DgpSpec::complex(8, 3, 3),
        DgpSpec::micro(),
    ]
}

#[test]
fn generated_batches_are_valid() {
    for spec in all_specs() {
        for seed in 0..100 {
            let batch = generate(&spec, 30, seed).unwrap();
            let v = validate(&batch);
            assert!(v.is_empty(), "{:?} seed {seed}: {}", spec.kind, v[0]);
        }
    }
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for spec in all_specs() {
        let batch = generate(&spec, 25, 3).unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&path, &batch).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), batch);
    }
}

/// Counts `(successes, trials)` per conditioning cell.
#[derive(Default)]
struct Freq(HashMap<Vec<u8>, (f64, f64)>);

impl Freq {
    fn add(&mut self, cell: &[f64], outcome: f64) {
        let key = cell.iter().map(|&x| x as u8).collect();
        let e = self.0.entry(key).or_default();
        e.0 += outcome;
        e.1 += 1.0;
    }

    fn check(&self, name: &str, p: impl Fn(&[f64]) -> f64) {
        for (key, &(k, m)) in &self.0 {
            let cell: Vec<f64> = key.iter().map(|&x| f64::from(x)).collect();
            let p0 = p(&cell);
            let se = (p0 * (1.0 - p0) / m).sqrt();
            let z = (k / m - p0) / se;
            assert!(
                z.abs() <= 3.0,
                "{name} at {key:?}: {} vs {p0} (z = {z:.2})",
                k / m
            );
        }
    }
}

#[test]
fn micro_frequencies_match_the_coefficient_table() {
    let batch = generate(&DgpSpec::micro(), 50_000, 11).unwrap();
    let [mut l1, mut a1, mut y1, mut l2, mut a2, mut y2]: [Freq; 6] = Default::default();
    for t in &batch.trajectories {
        let w = t.w[0];
        let (x1, t1) = (t.l[0][0], f64::from(t.a[0]));
        l1.add(&[w], x1);
        a1.add(&[w, x1], t1);
        y1.add(&[w, x1, t1], t.y[0]);
        if t.y[0] == 0.0 {
            let (x2, t2) = (t.l[1][0], f64::from(t.a[1]));
            l2.add(&[w, x1, t1], x2);
            a2.add(&[w, x2, t1], t2);
            y2.add(&[w, x1, x2, t1, t2], t.y[1]);
        }
    }
    l1.check("L1", |c| micro::p_l1(c[0]));
    a1.check("A1", |c| micro::p_a1(c[0], c[1]));
    y1.check("Y1", |c| micro::p_y1(c[0], c[1], c[2]));
    l2.check("L2", |c| micro::p_l2(c[0], c[1], c[2]));
    a2.check("A2", |c| micro::p_a2(c[0], c[1], c[2]));
    y2.check("Y2", |c| micro::p_y2(c[0], c[1], c[2], c[3], c[4]));
}

#[test]
fn monte_carlo_truth_is_seed_invariant() {
    let g = PolicySpec::always_treat();
    for spec in [DgpSpec::simple_survival(10), DgpSpec::simple_continuous(10)] {
        let a = monte_carlo_truth(&spec, &g, 200_000, 1).unwrap();
        let b = monte_carlo_truth(&spec, &g, 200_000, 2).unwrap();
        let se = a.mc_se.hypot(b.mc_se);
        assert!((a.psi0 - b.psi0).abs() <= 4.0 * se, "{a:?} {b:?}");
    }
    let spec = DgpSpec::complex(10, 5, 1);
    let g = spec.default_policy();
    let a = monte_carlo_truth(&spec, &g, 100_000, 1).unwrap();
    let b = monte_carlo_truth(&spec, &g, 100_000, 2).unwrap();
    assert!((a.psi0 - b.psi0).abs() <= 4.0 * a.mc_se.hypot(b.mc_se));
}

#[test]
fn micro_enumeration_agrees_with_simulation() {
    for g in [PolicySpec::always_treat(), PolicySpec::never_treat()] {
        let exact = exact_truth(&g);
        let mc = monte_carlo_truth(&DgpSpec::micro(), &g, 400_000, 5).unwrap();
        assert!(
            (exact.psi0 - mc.psi0).abs() <= 4.0 * mc.mc_se,
            "{} vs {} ({})",
            exact.psi0,
            mc.psi0,
            mc.mc_se
        );
    }
}

#[test]
fn pinned_truth_fixtures() {
    let micro = exact_truth(&PolicySpec::always_treat());
    assert!((micro.psi0 - 0.234_896_450_073_660_28).abs() <= 1e-15);
    assert_eq!(micro.mc_se, 0.0);

    let surv = monte_carlo_truth(
        &DgpSpec::simple_survival(10),
        &PolicySpec::always_treat(),
        1_000_000,
        20_240_601,
    )
    .unwrap();
    assert!((surv.psi0 - 0.066_083).abs() <= 1e-12, "{}", surv.psi0);
    assert!((surv.mc_se - 2.484_27e-4).abs() <= 1e-8, "{}", surv.mc_se);
}

/// Standardized difference in means of `x` between two groups.
fn z_diff(x0: &[f64], x1: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let m = x.len() as f64;
        let mean = x.iter().sum::<f64>() / m;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        (mean, var / m)
    };
    let (m0, v0) = stats(x0);
    let (m1, v1) = stats(x1);
    (m1 - m0) / (v0 + v1).sqrt()
}

#[test]
fn complex_lag_one_is_markov() {
    // With h = 1, L_t depends on the past only through (L_{t-1}, A_{t-1}) and
    // Y_t only through (L_t, A_t). Residuals after removing those lag-one
    // means must not depend on earlier treatment.
    let spec = DgpSpec {
        param_seed: 4,
        ..DgpSpec::complex(6, 2, 1)
    };
    assert_eq!(spec.kind, DgpKind::Complex);
    let params = ComplexParams::draw(1, spec.param_seed);
    let batch = generate(&spec, 60_000, 9).unwrap();
    let (mut l_res, mut y_res) = ([Vec::new(), Vec::new()], [Vec::new(), Vec::new()]);
    for traj in &batch.trajectories {
        for t in 3..=traj.stop {
            let a2 = usize::from(traj.a[t - 3]);
            let prev = f64::from(traj.a[t - 2]);
            for j in 0..spec.p {
                let mean = (params.alpha[0] * traj.l[t - 2][j]
                    + params.beta[0] * params.gamma[0] * (2.0 * prev - 1.0))
                    .tanh();
                l_res[a2].push(traj.l[t - 1][j] - mean);
            }
            let prod: f64 = traj.l[t - 1].iter().product();
            let at = f64::from(traj.a[t - 1]);
            let p = 1.0 / (1.0 + (-((prod - 0.7 * (at - 0.5)).tan() - 4.5)).exp());
            y_res[a2].push(traj.y[t - 1] - p);
        }
    }
    let zl = z_diff(&l_res[0], &l_res[1]);
    let zy = z_diff(&y_res[0], &y_res[1]);
    assert!(
        zl.abs() <= 4.0,
        "L residual depends on lag-2 treatment: z = {zl:.2}"
    );
    assert!(
        zy.abs() <= 4.0,
        "Y residual depends on lag-2 treatment: z = {zy:.2}"
    );
}
