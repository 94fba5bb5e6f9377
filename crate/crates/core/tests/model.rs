use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dltmle_core::autodiff::Tape;
use dltmle_core::data::apply_policy;
use dltmle_core::dgp::{gen_simple_survival, generate};
use dltmle_core::gradcheck::{check_gradient, tiny_setup, DEFAULT_PERTURBATION};
use dltmle_core::optim::Adam;
use dltmle_core::training::{td_targets, train, training_loss};
use dltmle_core::{Batch, DgpSpec, ModelConfig, PolicySpec, Tdht, Trajectory};

fn small_model(batch: &Batch, seed: u64) -> Tdht {
    let mut cfg = ModelConfig::preset("micro").unwrap();
    cfg.hidden_size = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.seed = seed;
    Tdht::for_batch(&cfg, batch).unwrap()
}

#[test]
fn two_subject_loss_gradient_matches_finite_differences() {
    let (model, batch) = tiny_setup(7).unwrap();
    let batch = batch.subset(&[0, 1]);
    let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
    let g = PolicySpec::always_treat();
    let actions: Vec<Vec<u8>> = trajs.iter().map(|t| apply_policy(t, &g).unwrap()).collect();
    let targets = td_targets(&model, &trajs, &actions).unwrap();
    let err = check_gradient(
        |tape, vars| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            training_loss(&model, tape, vars, &trajs, &targets, None, false, &mut rng)
                .map(|l| l.total)
        },
        &model.params,
        DEFAULT_PERTURBATION,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err:e}");
}

/// Gradient of the training loss and the parameters after one optimizer step.
fn one_update(model: &Tdht, batch: &Batch) -> (Vec<Option<Vec<f64>>>, Vec<dltmle_core::Tensor>) {
    let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
    let g = PolicySpec::always_treat();
    let actions: Vec<Vec<u8>> = trajs.iter().map(|t| apply_policy(t, &g).unwrap()).collect();
    let targets = td_targets(model, &trajs, &actions).unwrap();
    let mut tape = Tape::new();
    let vars = model.load(&mut tape, true);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let loss = training_loss(
        model, &mut tape, &vars, &trajs, &targets, None, false, &mut rng,
    )
    .unwrap();
    let grads = tape.backward(loss.total).unwrap();
    let g: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|v| grads.get(*v).map(<[f64]>::to_vec))
        .collect();
    let mut params = model.params.clone();
    Adam::new(1e-3, &params).step(&mut params, &g).unwrap();
    (g, params)
}

#[test]
fn post_stopping_tokens_do_not_move_the_parameters() {
    let batch = gen_simple_survival(40, 6, 8).unwrap();
    assert!(batch.trajectories.iter().any(|t| t.stop < 6));
    let model = small_model(&batch, 8);
    let mut altered = batch.clone();
    for traj in &mut altered.trajectories {
        for t in traj.stop..traj.tau() {
            traj.l[t][0] = 7.5 - t as f64;
            traj.a[t] ^= 1;
            traj.y[t] = 0.0;
        }
    }
    assert_ne!(altered, batch);
    let (ga, pa) = one_update(&model, &batch);
    let (gb, pb) = one_update(&model, &altered);
    assert_eq!(ga, gb);
    assert_eq!(pa, pb);
}

#[test]
fn subjects_do_not_interact() {
    let batch = gen_simple_survival(12, 5, 9).unwrap();
    let model = small_model(&batch, 9);
    let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
    let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
    let permuted: Vec<&Trajectory> = perm.iter().map(|&i| trajs[i]).collect();
    let a = model.predict(&trajs, None, false).unwrap();
    let b = model.predict(&permuted, None, false).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(b.q[k], a.q[i]);
        assert_eq!(b.pi[k], a.pi[i]);
    }
    let single = model.predict(&trajs[3..4], None, false).unwrap();
    assert_eq!(single.q[0], a.q[3]);
}

#[test]
fn evaluation_is_deterministic() {
    let batch = gen_simple_survival(20, 5, 10).unwrap();
    let mut cfg = ModelConfig::preset("micro").unwrap();
    cfg.dropout = 0.3;
    cfg.hidden_size = 8;
    cfg.n_heads = 2;
    let model = Tdht::for_batch(&cfg, &batch).unwrap();
    let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
    let a = model.predict(&trajs, None, false).unwrap();
    let b = model.predict(&trajs, None, false).unwrap();
    assert_eq!(a, b);
}

/// Median of the validation `L^Q` over the first and last tenth of epochs.
fn trend(spec: &DgpSpec, n: usize, seed: u64) -> (f64, f64) {
    let batch = generate(spec, n, seed).unwrap();
    let mut cfg = ModelConfig::preset_for(spec.kind, spec.tau).unwrap();
    cfg.seed = seed;
    let (_, report) = train(&batch, &spec.default_policy(), &cfg).unwrap();
    let k = (report.epochs() / 10).max(1);
    let median = |xs: &[dltmle_core::training::LossParts]| {
        let mut v: Vec<f64> = xs.iter().map(|p| p.q).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let e = report.epochs();
    (
        median(&report.validation[..k]),
        median(&report.validation[e - k..]),
    )
}

#[test]
fn validation_loss_trends_down_at_default_settings() {
    for (spec, n) in [
        (DgpSpec::simple_survival(10), 300),
        (DgpSpec::simple_continuous(10), 300),
        (DgpSpec::complex(10, 5, 1), 300),
        (DgpSpec::micro(), 1000),
    ] {
        let (first, last) = trend(&spec, n, 12);
        assert!(last <= first, "{:?}: {first} -> {last}", spec.kind);
    }
}
