//! Temporal-difference training of the transformer.
//!
//! `Q_t` is regressed on the stop-gradient target `V_{t+1}` (the model's own
//! Q head on the policy-substituted sequence) for `t < T` and on `Y_T` at
//! `t = T`, jointly with the propensity head (weight `alpha`) and, with
//! censoring, the censoring head (weight `beta`).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_value, Tape, Var};
use crate::data::{apply_policy, Batch, PolicySpec, Trajectory};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tdht::{ModelConfig, Standardizer, TdSchedule, Tdht};
use crate::tensor::Tensor;

pub const TRAIN_FRACTION: f64 = 0.7;
pub const MIN_TRAIN_SUBJECTS: usize = 10;

/// Loss components averaged over subjects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub q: f64,
    pub e: f64,
    pub c: f64,
}

impl LossParts {
    /// Unweighted `L^Q + L^e + L^c`, the model-selection criterion.
    pub fn selection(&self) -> f64 {
        self.q + self.e + self.c
    }

    pub fn weighted(&self, alpha: f64, beta: f64) -> f64 {
        self.q + alpha * self.e + beta * self.c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train: Vec<LossParts>,
    pub validation: Vec<LossParts>,
    /// 1-based epoch whose parameters were kept; 0 means the initialization.
    pub selected_epoch: usize,
    pub seconds: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_validation: usize,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.train.len()
    }

    /// CSV log with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_q,train_e,train_c,val_q,val_e,val_c,selected\n");
        for (i, (tr, va)) in self.train.iter().zip(&self.validation).enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                i + 1,
                tr.q,
                tr.e,
                tr.c,
                va.q,
                va.e,
                va.c,
                u8::from(i + 1 == self.selected_epoch)
            ));
        }
        s
    }
}

/// Per-subject masks and targets for one group of sequences.
pub struct TdTargets {
    /// `target[i][t - 1]`: `V_{t+1}` for `t < T`, `Y_T` at `t = T`.
    pub target: Vec<Vec<f64>>,
    /// `1{t <= T}` minus the censored terminal step.
    pub q_mask: Vec<Vec<f64>>,
    /// `1{t <= T}`.
    pub valid: Vec<Vec<f64>>,
}

/// Bootstrapped targets from the current model in evaluation mode.
pub fn td_targets(
    model: &Tdht,
    trajs: &[&Trajectory],
    policy_actions: &[Vec<u8>],
) -> Result<TdTargets> {
    let v = model.eval_v(trajs, policy_actions)?;
    let tau = model.dims.tau;
    let mut out = TdTargets {
        target: Vec::with_capacity(trajs.len()),
        q_mask: Vec::with_capacity(trajs.len()),
        valid: Vec::with_capacity(trajs.len()),
    };
    for (traj, vrow) in trajs.iter().zip(v) {
        out.target.push(vrow[1..].to_vec());
        let valid: Vec<f64> = (1..=tau)
            .map(|t| f64::from(u8::from(t <= traj.stop)))
            .collect();
        let mut qm = valid.clone();
        if traj.censored() {
            qm[traj.stop - 1] = 0.0;
        }
        out.q_mask.push(qm);
        out.valid.push(valid);
    }
    Ok(out)
}

/// Tape variables for the loss and its components.
pub struct LossVars {
    pub total: Var,
    pub q: Var,
    pub e: Var,
    pub c: Option<Var>,
}

fn flat(rows: &[Vec<f64>], b: usize, tau: usize) -> Tensor {
    Tensor::new(vec![b, tau], rows.iter().flatten().copied().collect()).expect("rectangular")
}

/// Builds the training objective on `tape`.
///
/// `only_t` restricts every term to a single step (1-based), as in the
/// backward schedule.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    model: &Tdht,
    tape: &mut Tape,
    params: &[Var],
    trajs: &[&Trajectory],
    targets: &TdTargets,
    only_t: Option<usize>,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LossVars> {
    let cfg = &model.config;
    if cfg.alpha < 0.0 || cfg.beta < 0.0 {
        return Err(Error::Config("alpha and beta must be nonnegative".into()));
    }
    let (b, tau) = (trajs.len(), model.dims.tau);
    let enc = model.encode(trajs, None, false)?;
    let heads = model.forward(tape, params, &enc, train, rng)?;
    let step_mask = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        match only_t {
            None => rows.to_vec(),
            Some(t) => rows
                .iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(i, &m)| if i + 1 == t { m } else { 0.0 })
                        .collect()
                })
                .collect(),
        }
    };
    let inv_b = 1.0 / b as f64;
    let masked_mean =
        |tape: &mut Tape, pred: Var, target: Tensor, mask: &[Vec<f64>]| -> Result<Var> {
            let tv = tape.constant(target);
            let l = tape.bce(pred, tv)?;
            let m = tape.constant(flat(mask, b, tau));
            let l = tape.mul(l, m)?;
            let s = tape.sum(l);
            Ok(tape.scale(s, inv_b))
        };
    let target = tape.constant(flat(&targets.target, b, tau));
    let target = tape.stop_gradient(target);
    let lq = {
        let l = tape.bce(heads.q, target)?;
        let m = tape.constant(flat(&step_mask(&targets.q_mask), b, tau));
        let l = tape.mul(l, m)?;
        let s = tape.sum(l);
        tape.scale(s, inv_b)
    };
    let valid = step_mask(&targets.valid);
    let actions: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| t.a.iter().map(|&a| f64::from(a)).collect())
        .collect();
    let le = masked_mean(tape, heads.pi, flat(&actions, b, tau), &valid)?;
    let mut total = {
        let s = tape.scale(le, cfg.alpha);
        tape.add(lq, s)?
    };
    let mut lc = None;
    if let Some(lcv) = heads.lambda_c {
        let cens: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| {
                t.c.as_ref().map_or(vec![0.0; tau], |c| {
                    c.iter().map(|&x| f64::from(x)).collect()
                })
            })
            .collect();
        let l = masked_mean(tape, lcv, flat(&cens, b, tau), &valid)?;
        let s = tape.scale(l, cfg.beta);
        total = tape.add(total, s)?;
        lc = Some(l);
    }
    Ok(LossVars {
        total,
        q: lq,
        e: le,
        c: lc,
    })
}

/// Loss components in evaluation mode, computed from plain predictions.
pub fn evaluate_loss(
    model: &Tdht,
    trajs: &[&Trajectory],
    policy_actions: &[Vec<u8>],
) -> Result<LossParts> {
    if trajs.is_empty() {
        return Ok(LossParts::default());
    }
    let targets = td_targets(model, trajs, policy_actions)?;
    let raw = model.predict(trajs, None, false)?;
    let mut parts = LossParts::default();
    for (i, traj) in trajs.iter().enumerate() {
        for t in 0..traj.stop {
            parts.q += targets.q_mask[i][t] * bce_value(raw.q[i][t], targets.target[i][t]);
            parts.e += bce_value(raw.pi[i][t], f64::from(traj.a[t]));
            if let Some(lc) = &raw.lambda_c {
                let c = traj.c.as_ref().map_or(0.0, |c| f64::from(c[t]));
                parts.c += bce_value(lc[i][t], c);
            }
        }
    }
    let n = trajs.len() as f64;
    Ok(LossParts {
        q: parts.q / n,
        e: parts.e / n,
        c: parts.c / n,
    })
}

/// Shuffled 70/30 split of subject indices.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < MIN_TRAIN_SUBJECTS {
        return Err(Error::Config(format!(
            "training needs at least {MIN_TRAIN_SUBJECTS} subjects, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5011);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let val = idx.split_off(n_train);
    if val.is_empty() {
        return Err(Error::Config("empty validation split".into()));
    }
    Ok((idx, val))
}

fn step(
    model: &mut Tdht,
    opt: &mut Adam,
    trajs: &[&Trajectory],
    actions: &[Vec<u8>],
    only_t: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let targets = td_targets(model, trajs, actions)?;
    let mut tape = Tape::new();
    let params = model.load(&mut tape, true);
    let loss = training_loss(
        model, &mut tape, &params, trajs, &targets, only_t, true, rng,
    )?;
    let total = tape.value(loss.total).item()?;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {total}")));
    }
    let parts = LossParts {
        q: tape.value(loss.q).item()?,
        e: tape.value(loss.e).item()?,
        c: loss.c.map_or(Ok(0.0), |c| tape.value(c).item())?,
    };
    let mut grads = tape.backward(loss.total)?;
    let g: Vec<Option<Vec<f64>>> = params.iter().map(|&p| grads.take(p)).collect();
    opt.step(&mut model.params, &g)?;
    Ok(parts)
}

/// Trains a fresh model on `dataset` (outcomes already on the `[0, 1]`
/// scale) and returns the best-validation parameters.
pub fn train(dataset: &Batch, g: &PolicySpec, cfg: &ModelConfig) -> Result<(Tdht, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let (train_idx, val_idx) = split_indices(dataset.n(), cfg.seed)?;
    let mut model = Tdht::for_batch(cfg, dataset)?;
    let all: Vec<&Trajectory> = dataset.trajectories.iter().collect();
    let actions: Vec<Vec<u8>> = all
        .iter()
        .map(|t| apply_policy(t, g))
        .collect::<Result<_>>()?;
    let train_set: Vec<&Trajectory> = train_idx.iter().map(|&i| all[i]).collect();
    let val_set: Vec<&Trajectory> = val_idx.iter().map(|&i| all[i]).collect();
    let val_actions: Vec<Vec<u8>> = val_idx.iter().map(|&i| actions[i].clone()).collect();
    model.standardizer = Standardizer::fit(&train_set, &model.dims);

    let mut opt = Adam::new(cfg.lr, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut report = TrainReport {
        train: Vec::new(),
        validation: Vec::new(),
        selected_epoch: 0,
        seconds: 0.0,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        n_train: train_idx.len(),
        n_validation: val_idx.len(),
    };
    let mut best = (f64::INFINITY, model.params.clone());
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let trajs: Vec<&Trajectory> = chunk.iter().map(|&i| all[i]).collect();
            let acts: Vec<Vec<u8>> = chunk.iter().map(|&i| actions[i].clone()).collect();
            let parts = match cfg.td_schedule {
                TdSchedule::Joint => step(&mut model, &mut opt, &trajs, &acts, None, &mut rng),
                TdSchedule::Backward => {
                    let mut acc = LossParts::default();
                    for t in (1..=model.dims.tau).rev() {
                        let p = step(&mut model, &mut opt, &trajs, &acts, Some(t), &mut rng)?;
                        acc.q += p.q;
                        acc.e += p.e;
                        acc.c += p.c;
                    }
                    Ok(acc)
                }
            }
            .map_err(|e| Error::Estimation(format!("epoch {epoch}: {e}")))?;
            sum.q += parts.q;
            sum.e += parts.e;
            sum.c += parts.c;
            batches += 1;
        }
        let k = batches.max(1) as f64;
        report.train.push(LossParts {
            q: sum.q / k,
            e: sum.e / k,
            c: sum.c / k,
        });
        let val = evaluate_loss(&model, &val_set, &val_actions)?;
        if !val.selection().is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss at epoch {epoch}"
            )));
        }
        log::debug!(
            "epoch {epoch}: train {:?} validation {:?}",
            report.train.last(),
            val
        );
        if val.selection() < best.0 {
            best = (val.selection(), model.params.clone());
            report.selected_epoch = epoch;
        }
        report.validation.push(val);
    }
    if cfg.epochs > 0 {
        model.params = best.1;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp;

    fn tiny(epochs: usize) -> ModelConfig {
        ModelConfig {
            embedding_dim: 4,
            hidden_size: 8,
            n_layers: 1,
            n_heads: 2,
            dropout: 0.0,
            lr: 1e-2,
            alpha: 0.1,
            beta: 0.0,
            epochs,
            seed: 7,
            batch_size: 16,
            td_schedule: TdSchedule::Joint,
            shared_embedding: false,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let batch = dgp::gen_simple_survival(30, 3, 1).unwrap();
        let (model, report) = train(&batch, &PolicySpec::always_treat(), &tiny(0)).unwrap();
        let init = Tdht::for_batch(&tiny(0), &batch).unwrap();
        assert_eq!(model.params, init.params);
        assert_eq!(report.epochs(), 0);
        assert_eq!(report.selected_epoch, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let batch = dgp::gen_simple_survival(40, 3, 2).unwrap();
        let g = PolicySpec::always_treat();
        let (a, ra) = train(&batch, &g, &tiny(2)).unwrap();
        let (b, rb) = train(&batch, &g, &tiny(2)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra.train, rb.train);
    }

    #[test]
    fn too_few_subjects() {
        let batch = dgp::gen_simple_survival(5, 3, 2).unwrap();
        assert!(train(&batch, &PolicySpec::always_treat(), &tiny(1)).is_err());
    }

    #[test]
    fn terminal_target_is_observed_outcome() {
        let batch = dgp::gen_simple_survival(20, 4, 3).unwrap();
        let model = Tdht::for_batch(&tiny(0), &batch).unwrap();
        let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
        let acts: Vec<Vec<u8>> = trajs
            .iter()
            .map(|t| apply_policy(t, &PolicySpec::always_treat()).unwrap())
            .collect();
        let tg = td_targets(&model, &trajs, &acts).unwrap();
        for (i, t) in trajs.iter().enumerate() {
            assert_eq!(tg.target[i][t.stop - 1], t.final_outcome());
            assert_eq!(tg.valid[i].iter().sum::<f64>(), t.stop as f64);
        }
    }

    #[test]
    fn alpha_zero_gives_no_propensity_gradient() {
        let batch = dgp::gen_simple_survival(6, 3, 4).unwrap();
        let cfg = ModelConfig {
            alpha: 0.0,
            ..tiny(0)
        };
        let model = Tdht::for_batch(&cfg, &batch).unwrap();
        let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
        let acts: Vec<Vec<u8>> = trajs
            .iter()
            .map(|t| apply_policy(t, &PolicySpec::always_treat()).unwrap())
            .collect();
        let tg = td_targets(&model, &trajs, &acts).unwrap();
        let mut tape = Tape::new();
        let p = model.load(&mut tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss =
            training_loss(&model, &mut tape, &p, &trajs, &tg, None, false, &mut rng).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        let head = model.names.iter().position(|n| n == "head.weight").unwrap();
        let g = grads.get(p[head]).unwrap();
        // Column 0 of the joint head feeds only the propensity output.
        let width = model.params[head].last_dim();
        assert!(g.iter().step_by(width).all(|&x| x == 0.0));
    }
}
