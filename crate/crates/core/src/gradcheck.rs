//! Finite-difference verification of tape gradients, the causal mask, and
//! the targeting derivative identity.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::data::{apply_policy, Batch, PolicySpec, Trajectory};
use crate::error::{Error, Result};
use crate::targeting::{clever_covariates, fluctuate, td_targeting, Truncation};
use crate::tdht::{ModelConfig, Slot, Tdht};
use crate::tensor::Tensor;
use crate::training::{td_targets, training_loss};

pub const DEFAULT_PERTURBATION: f64 = 1e-5;

/// Maximum over coordinates of `|autodiff - central difference| /
/// max(1, |autodiff|)`.
///
/// `f` builds a scalar on a fresh tape from the parameter leaves it is given.
pub fn check_gradient<F>(f: F, point: &[Tensor], perturbation: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = point.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for j in 0..point[pi].len() {
            let x0 = point[pi].data()[j];
            work[pi].data_mut()[j] = x0 + perturbation;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = x0 - perturbation;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = x0;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at perturbed coordinate {pi}[{j}]"
                )));
            }
            let fd = (up - down) / (2.0 * perturbation);
            let ad = analytic.map_or(0.0, |g| g[j]);
            worst = worst.max((ad - fd).abs() / ad.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// One named numerical check with its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

/// Tolerance for primitive gradients against central differences.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Tolerance for the gradient of the full training loss.
pub const FULL_LOSS_TOL: f64 = 1e-4;
/// Tolerance for the partial-loss derivative identity of targeting.
pub const PARTIAL_LOSS_TOL: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Gradient checks of every differentiable primitive, each reduced to a
/// scalar through a random linear functional.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, &[2, 3, 4], 1.0);
    let weigh = move |t: &mut Tape, y: Var| -> Result<Var> {
        let n = t.value(y).len();
        let coef = Tensor::new(t.value(y).shape().to_vec(), w.data()[..n].to_vec())?;
        let c = t.constant(coef);
        let p = t.mul(y, c)?;
        Ok(t.sum(p))
    };
    let h = DEFAULT_PERTURBATION;
    let mut out = Vec::new();
    let mut check = |name: &str,
                     point: Vec<Tensor>,
                     f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>|
     -> Result<()> {
        let err = check_gradient(|t, v| f(t, v).and_then(|y| weigh(t, y)), &point, h)?;
        out.push(CheckOutcome::new(name, err, PRIMITIVE_TOL));
        Ok(())
    };
    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[4, 2], 1.0);
    check("matmul", vec![a.clone(), b], &|t, v| t.matmul(v[0], v[1]))?;
    let x = randn(&mut rng, &[2, 3, 4], 1.0);
    let y = randn(&mut rng, &[2, 4, 3], 1.0);
    check("bmm", vec![x.clone(), y], &|t, v| t.bmm(v[0], v[1], false))?;
    let y = randn(&mut rng, &[2, 3, 4], 1.0);
    check("bmm transposed", vec![x.clone(), y.clone()], &|t, v| {
        t.bmm(v[0], v[1], true)
    })?;
    let bias = randn(&mut rng, &[4], 1.0);
    check("add broadcast", vec![a.clone(), bias.clone()], &|t, v| {
        t.add(v[0], v[1])
    })?;
    let a2 = randn(&mut rng, &[3, 4], 1.0);
    check("sub", vec![a.clone(), a2.clone()], &|t, v| {
        t.sub(v[0], v[1])
    })?;
    check("mul", vec![a.clone(), a2], &|t, v| t.mul(v[0], v[1]))?;
    check("scale", vec![a.clone()], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    check("sigmoid", vec![a.clone()], &|t, v| Ok(t.sigmoid(v[0])))?;
    check("tanh", vec![a.clone()], &|t, v| Ok(t.tanh(v[0])))?;
    check("exp", vec![a.clone()], &|t, v| Ok(t.exp(v[0])))?;
    let pos = uniform(&mut rng, &[3, 4], 0.5, 2.0);
    check("log", vec![pos], &|t, v| Ok(t.log(v[0])))?;
    check("gelu", vec![a.clone()], &|t, v| Ok(t.gelu(v[0])))?;
    check("softmax", vec![x.clone()], &|t, v| t.softmax(v[0], None))?;
    let mut mask = Tensor::zeros(&[3, 4]);
    for r in 0..3 {
        for c in (r + 1)..4 {
            mask.data_mut()[r * 4 + c] = f64::NEG_INFINITY;
        }
    }
    check("masked softmax", vec![x.clone()], &move |t, v| {
        t.softmax(v[0], Some(&mask))
    })?;
    let gamma = randn(&mut rng, &[4], 1.0);
    check("layer norm", vec![x.clone(), gamma, bias], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    })?;
    let probs = uniform(&mut rng, &[3, 4], 0.05, 0.95);
    let targets = uniform(&mut rng, &[3, 4], 0.0, 1.0);
    check("bce", vec![probs], &move |t, v| {
        let y = t.constant(targets.clone());
        t.bce(v[0], y)
    })?;
    let c = randn(&mut rng, &[3, 2], 1.0);
    check("concat", vec![a.clone(), c.clone()], &|t, v| {
        t.concat_last(&[v[0], v[1]])
    })?;
    let r = randn(&mut rng, &[2, 4], 1.0);
    check("concat rows", vec![a.clone(), r], &|t, v| {
        t.concat_rows(&[v[0], v[1]])
    })?;
    check("select rows", vec![a.clone()], &|t, v| {
        t.select_rows(v[0], &[2, 0, 2])
    })?;
    check("slice", vec![a.clone()], &|t, v| t.slice_last(v[0], 1, 2))?;
    check("reshape and permute", vec![x], &|t, v| {
        let y = t.permute(v[0], &[0, 2, 1])?;
        t.reshape(y, &[2, 12])
    })?;
    check("mean", vec![a], &|t, v| Ok(t.mean(v[0])))?;
    Ok(out)
}

/// A small model on a small censored survival batch.
pub fn tiny_setup(seed: u64) -> Result<(Tdht, Batch)> {
    let mut batch = crate::dgp::gen_simple_survival(6, 3, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    batch.header.censoring = true;
    for traj in &mut batch.trajectories {
        let tau = traj.tau();
        let mut c = vec![0u8; tau];
        if rng.random_bool(0.5) {
            let at = rng.random_range(0..tau);
            c[at] = 1;
        }
        let mode = batch.header.mode;
        *traj = Trajectory::new(
            traj.w.clone(),
            traj.l.clone(),
            traj.a.clone(),
            traj.y.clone(),
            Some(c),
            mode,
        );
    }
    let mut cfg = ModelConfig::preset("micro")?;
    cfg.embedding_dim = 3;
    cfg.hidden_size = 4;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.beta = 0.3;
    cfg.alpha = 0.7;
    cfg.seed = seed;
    let mut model = Tdht::for_batch(&cfg, &batch)?;
    // Spread parameters away from the near-zero head initialization.
    for t in model.params.iter_mut() {
        for x in t.data_mut() {
            *x += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((model, batch))
}

/// Worst relative error of the full training-loss gradient over all parameters.
pub fn full_loss_check(seed: u64) -> Result<f64> {
    let (model, batch) = tiny_setup(seed)?;
    let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
    let g = PolicySpec::always_treat();
    let actions: Vec<Vec<u8>> = trajs
        .iter()
        .map(|t| apply_policy(t, &g))
        .collect::<Result<_>>()?;
    let targets = td_targets(&model, &trajs, &actions)?;
    check_gradient(
        |tape, vars| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            training_loss(&model, tape, vars, &trajs, &targets, None, false, &mut rng)
                .map(|l| l.total)
        },
        &model.params,
        DEFAULT_PERTURBATION,
    )
}

/// Perturbs the content of every token in turn and counts outputs at
/// earlier tokens that change at all. Returns `(positions tested, violations)`.
pub fn causal_mask_check(seed: u64) -> Result<(usize, usize)> {
    let (model, batch) = tiny_setup(seed)?;
    causal_violations(&model, &batch, seed)
}

pub(crate) fn causal_violations(model: &Tdht, batch: &Batch, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let dims = model.dims;
    let s = dims.seq_len();
    let width = {
        let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
        model.token_outputs(&trajs)?.last_dim()
    };
    let mut tested = 0;
    let mut violations = 0;
    for (i, orig) in batch.trajectories.iter().enumerate() {
        let base = model.token_outputs(&[orig])?;
        for pos in 0..s {
            let mut traj = orig.clone();
            if pos == 0 {
                for x in &mut traj.w {
                    *x += 1.0 + rng.random::<f64>();
                }
            } else {
                let t = (pos - 1) / dims.tokens_per_step() + 1;
                let slot = [Slot::L, Slot::A, Slot::C, Slot::Y]
                    .into_iter()
                    .find(|&sl| (sl != Slot::C || dims.censoring) && dims.position(t, sl) == pos)
                    .ok_or_else(|| Error::Config(format!("no token at position {pos}")))?;
                match slot {
                    Slot::L => traj.l[t - 1]
                        .iter_mut()
                        .for_each(|x| *x += 1.0 + rng.random::<f64>()),
                    Slot::A => traj.a[t - 1] ^= 1,
                    Slot::C => {
                        if let Some(c) = traj.c.as_mut() {
                            c[t - 1] ^= 1;
                        }
                    }
                    Slot::Y => traj.y[t - 1] = 1.0 - traj.y[t - 1],
                }
            }
            let out = model.token_outputs(&[&traj])?;
            tested += 1;
            let before = pos * width;
            if out.data()[..before] != base.data()[..before] {
                violations += 1;
                log::warn!("subject {i}: perturbing token {pos} changed an earlier output");
            }
        }
    }
    Ok((tested, violations))
}

/// Relative error of the finite-difference derivative of the partial
/// targeting loss against `-P_n D*` at the fluctuation accepted by
/// common-fluctuation targeting, on the micro generator with distorted
/// oracle nuisances.
pub fn partial_loss_identity_check(seed: u64, n: usize) -> Result<f64> {
    let batch = crate::dgp::gen_tabular_micro(n, seed)?;
    let oracle = crate::dgp::MicroOracle::new(PolicySpec::always_treat());
    let mut fit = oracle.fit_outputs(&batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..fit.n() {
        for t in 0..fit.tau() {
            let shift = 0.4 * rng.sample::<f64, _>(StandardNormal);
            fit.q_hat[i][t] = fluctuate(fit.q_hat[i][t], shift);
            if t < fit.stop[i] {
                fit.v_hat[i][t] = fluctuate(fit.v_hat[i][t], shift);
            }
        }
    }
    let cc = clever_covariates(&batch, &fit, Truncation::None)?;
    let out = td_targeting(&batch, &fit, &cc, crate::targeting::DEFAULT_MAX_ITER)?;
    out.fd_error
        .ok_or_else(|| Error::Estimation("targeting returned no derivative check".into()))
}

/// Everything the `gradcheck` command runs.
pub fn full_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = primitive_suite(seed)?;
    out.push(CheckOutcome::new(
        "full training loss",
        full_loss_check(seed)?,
        FULL_LOSS_TOL,
    ));
    let (tested, violations) = causal_mask_check(seed)?;
    log::info!("causal mask: {tested} perturbations");
    out.push(CheckOutcome::new(
        "causal mask violations",
        violations as f64,
        0.0,
    ));
    out.push(CheckOutcome::new(
        "partial-loss derivative identity",
        partial_loss_identity_check(seed, 2000)?,
        PARTIAL_LOSS_TOL,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_essentially_exact() {
        let err = check_gradient(
            |t, v| t.mul(v[0], v[0]).map(|y| t.sum(y)),
            &[Tensor::scalar(1.0)],
            DEFAULT_PERTURBATION,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = check_gradient(
            |t, _v| Ok(t.constant(Tensor::scalar(4.2))),
            &[Tensor::vector(vec![1.0, 2.0])],
            DEFAULT_PERTURBATION,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn primitives_match_finite_differences() {
        for c in primitive_suite(3).unwrap() {
            assert!(c.passed(), "{}: {}", c.name, c.value);
        }
    }

    #[test]
    fn full_loss_gradient() {
        let err = full_loss_check(11).unwrap();
        assert!(err <= FULL_LOSS_TOL, "{err}");
    }

    #[test]
    fn causal_mask_is_exact() {
        let (tested, violations) = causal_mask_check(5).unwrap();
        assert!(tested > 0);
        assert_eq!(violations, 0);
    }

    #[test]
    fn non_finite_perturbation_is_an_error() {
        // log(x) at x = 0 + h is finite, at 0 - h it is NaN.
        let res = check_gradient(
            |t, v| Ok(t.log(v[0])),
            &[Tensor::scalar(0.0)],
            DEFAULT_PERTURBATION,
        );
        assert!(res.is_err());
    }
}
