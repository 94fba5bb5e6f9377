//! Classical sequential-regression LTMLE with logistic GLM nuisance fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_value, sigmoid};
use crate::data::{apply_policy, Batch, OutcomeMode, OutcomeScaler, PolicySpec, Trajectory};
use crate::error::{shape_err, Error, Result};
use crate::targeting::{
    clever_covariates, fluctuate, logit, solve_fluctuation, step_scores, summarize, unscale_result,
    Epsilon, EstimateResult, FluctuationData, Method, Targeted, Truncation,
};
use crate::tdht::FitOutputs;

/// Largest history (in binary variables) the saturated map accepts.
const MAX_SATURATED_VARS: usize = 16;
/// Coefficient size above which a fit is reported as (quasi-)separated.
const SEPARATION_COEF: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    /// `(w, l_t, a_t, a_{t-1}, 1)`; propensity models drop `a_t`.
    CurrentLag,
    /// One indicator per cell of the full binary history.
    Saturated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlmSpec {
    pub features: FeatureMap,
    pub max_iter: usize,
    pub ridge: f64,
    pub truncation: Truncation,
}

impl Default for GlmSpec {
    fn default() -> Self {
        Self {
            features: FeatureMap::CurrentLag,
            max_iter: 100,
            ridge: 1e-8,
            truncation: Truncation::None,
        }
    }
}

impl GlmSpec {
    pub fn saturated() -> Self {
        Self {
            features: FeatureMap::Saturated,
            ..Self::default()
        }
    }
}

/// Coefficients of a fitted logistic model.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub separated: bool,
}

impl LogisticFit {
    pub fn predict(&self, x: &[f64], offset: f64) -> f64 {
        sigmoid(offset + x.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>())
    }
}

fn objective(x: &[Vec<f64>], y: &[f64], w: &[f64], off: &[f64], beta: &[f64], ridge: f64) -> f64 {
    let fit: f64 = x
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let eta = off[i] + row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            w[i] * bce_value(sigmoid(eta), y[i])
        })
        .sum();
    fit + 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Weighted logistic regression with offset by IRLS (Newton with
/// step-halving) on the ridge-stabilized normal equations. Targets may be
/// fractional (quasi-binomial).
pub fn fit_logistic(
    x: &[Vec<f64>],
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    max_iter: usize,
    ridge: f64,
) -> Result<LogisticFit> {
    let n = x.len();
    if y.len() != n || weights.len() != n || offset.len() != n {
        return Err(shape_err(
            "fit_logistic",
            format!(
                "{n} rows, {} targets, {} weights, {} offsets",
                y.len(),
                weights.len(),
                offset.len()
            ),
        ));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Data(
            "logistic fit: weights must be finite and nonnegative".into(),
        ));
    }
    let p = x.first().map_or(0, Vec::len);
    let mut beta = vec![0.0; p];
    if p == 0 {
        return Ok(LogisticFit {
            coef: beta,
            iterations: 0,
            separated: false,
        });
    }
    let mut obj = objective(x, y, weights, offset, &beta, ridge);
    for iter in 1..=max_iter {
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut g = DVector::<f64>::zeros(p);
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &x[i];
            let mu = sigmoid(offset[i] + row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>());
            let r = weights[i] * (y[i] - mu);
            let v = weights[i] * mu * (1.0 - mu);
            for j in 0..p {
                if row[j] == 0.0 {
                    continue;
                }
                g[j] += r * row[j];
                for k in j..p {
                    h[(j, k)] += v * row[j] * row[k];
                }
            }
        }
        for j in 0..p {
            g[j] -= ridge * beta[j];
            h[(j, j)] += ridge;
            for k in 0..j {
                h[(j, k)] = h[(k, j)];
            }
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => h.lu().solve(&g).ok_or_else(|| {
                Error::Estimation("logistic fit: singular information matrix".into())
            })?,
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + scale * s)
                .collect();
            let cand_obj = objective(x, y, weights, offset, &cand, ridge);
            if cand_obj <= obj + 1e-12 * obj.abs().max(1.0) {
                accepted = Some((cand, cand_obj));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cand_obj)) = accepted else {
            break;
        };
        let delta = step.iter().map(|s| (scale * s).abs()).fold(0.0, f64::max);
        let gain = obj - cand_obj;
        beta = cand;
        obj = cand_obj;
        if delta <= 1e-10 || gain <= 1e-13 * obj.abs().max(1.0) {
            let separated = beta.iter().any(|b| b.abs() > SEPARATION_COEF);
            if separated {
                log::warn!(
                    "logistic fit: coefficients exceed {SEPARATION_COEF}; data look separable"
                );
            }
            return Ok(LogisticFit {
                coef: beta,
                iterations: iter,
                separated,
            });
        }
    }
    Err(Error::Estimation(format!(
        "logistic fit did not converge in {max_iter} iterations"
    )))
}

/// Which model a design row is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    /// Treatment at `t`: history before `A_t`.
    Treatment,
    /// Outcome or censoring at `t`: history through `A_t`.
    Outcome,
}

fn saturated_vars(d_w: usize, d_l: usize, t: usize, role: Role) -> usize {
    d_w + t * d_l + t - usize::from(role == Role::Treatment)
}

/// Design row at 1-based `t`, with `actions` supplying `A_{1:t}`.
fn design_row(
    features: FeatureMap,
    traj: &Trajectory,
    actions: &[u8],
    t: usize,
    role: Role,
) -> Result<Vec<f64>> {
    match features {
        FeatureMap::CurrentLag => {
            let mut row = traj.w.clone();
            row.extend_from_slice(&traj.l[t - 1]);
            if role == Role::Outcome {
                row.push(f64::from(actions[t - 1]));
            }
            row.push(if t > 1 {
                f64::from(actions[t - 2])
            } else {
                0.0
            });
            row.push(1.0);
            Ok(row)
        }
        FeatureMap::Saturated => {
            let mut bits: Vec<f64> = traj.w.clone();
            for (s, (l, &a)) in traj.l.iter().zip(actions).take(t).enumerate() {
                bits.extend_from_slice(l);
                if s + 1 < t || role == Role::Outcome {
                    bits.push(f64::from(a));
                }
            }
            let mut cell = 0usize;
            for b in &bits {
                if *b != 0.0 && *b != 1.0 {
                    return Err(Error::Data(format!(
                        "saturated features need binary history, found {b}"
                    )));
                }
                cell = (cell << 1) | (*b as usize);
            }
            let mut row = vec![0.0; 1 << bits.len()];
            row[cell] = 1.0;
            Ok(row)
        }
    }
}

fn check_features(spec: &GlmSpec, batch: &Batch) -> Result<()> {
    if spec.features == FeatureMap::Saturated {
        let vars = saturated_vars(
            batch.header.d_w,
            batch.header.d_l,
            batch.tau(),
            Role::Outcome,
        );
        if vars > MAX_SATURATED_VARS {
            return Err(Error::Config(format!(
                "saturated features need {vars} binary history variables; at most {MAX_SATURATED_VARS} supported"
            )));
        }
    }
    Ok(())
}

fn censored_at(traj: &Trajectory, t: usize) -> bool {
    traj.c.as_ref().is_some_and(|c| c[t - 1] == 1)
}

/// Fits `P(target_t = 1 | design)` among subjects at risk at `t` and
/// returns the fitted probability for every subject.
fn nuisance_column(
    batch: &Batch,
    spec: &GlmSpec,
    t: usize,
    role: Role,
    include: impl Fn(&Trajectory) -> bool,
    target: impl Fn(&Trajectory) -> f64,
) -> Result<Vec<f64>> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for traj in &batch.trajectories {
        if traj.stop >= t && include(traj) {
            x.push(design_row(spec.features, traj, &traj.a, t, role)?);
            y.push(target(traj));
        }
    }
    let ones = vec![1.0; x.len()];
    let zeros = vec![0.0; x.len()];
    let fit = fit_logistic(&x, &y, &ones, &zeros, spec.max_iter, spec.ridge)?;
    batch
        .trajectories
        .iter()
        .map(|traj| Ok(fit.predict(&design_row(spec.features, traj, &traj.a, t, role)?, 0.0)))
        .collect()
}

/// Sequential-regression TMLE with GLM nuisance fits. Continuous outcomes
/// are mapped onto `[0, 1]` internally and the estimate is mapped back.
pub fn ltmle_glm(batch: &Batch, g: &PolicySpec, spec: &GlmSpec) -> Result<Targeted> {
    check_features(spec, batch)?;
    if batch.n() < 2 {
        return Err(Error::Estimation(format!(
            "need at least 2 subjects, got {}",
            batch.n()
        )));
    }
    let scaler = match batch.mode() {
        OutcomeMode::Continuous => Some(OutcomeScaler::fit(batch)?),
        OutcomeMode::Survival => None,
    };
    let scaled;
    let batch = match &scaler {
        Some(s) => {
            scaled = s.rescale(batch)?;
            &scaled
        }
        None => batch,
    };
    let (n, tau) = (batch.n(), batch.tau());
    let policy_actions: Vec<Vec<u8>> = batch
        .trajectories
        .iter()
        .map(|t| apply_policy(t, g))
        .collect::<Result<_>>()?;

    let mut pi_cols = Vec::with_capacity(tau);
    let mut lc_cols = Vec::new();
    for t in 1..=tau {
        pi_cols.push(nuisance_column(
            batch,
            spec,
            t,
            Role::Treatment,
            |_| true,
            |tr| f64::from(tr.a[t - 1]),
        )?);
        if batch.header.censoring {
            lc_cols.push(nuisance_column(
                batch,
                spec,
                t,
                Role::Outcome,
                |_| true,
                |tr| if censored_at(tr, t) { 1.0 } else { 0.0 },
            )?);
        }
    }
    let by_subject = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| cols.iter().map(|c| c[i]).collect())
            .collect()
    };

    let mut fit = FitOutputs {
        pi_hat: by_subject(&pi_cols),
        q_hat: vec![vec![0.5; tau]; n],
        v_hat: batch
            .trajectories
            .iter()
            .map(|tr| vec![tr.final_outcome(); tau + 1])
            .collect(),
        lambda_c_hat: batch.header.censoring.then(|| by_subject(&lc_cols)),
        stop: batch.trajectories.iter().map(|tr| tr.stop).collect(),
        policy_actions,
    };
    let cc = clever_covariates(batch, &fit, spec.truncation)?;

    let mut eps = vec![0.0; tau];
    for t in (1..=tau).rev() {
        // Regression target: Y_T at the last step, else the targeted V_{t+1}.
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut rows = Vec::new();
        for (i, traj) in batch.trajectories.iter().enumerate() {
            if traj.stop < t || censored_at(traj, t) {
                continue;
            }
            let next = if t < traj.stop {
                fluctuate(fit.v_hat[i][t], eps[t])
            } else {
                traj.final_outcome()
            };
            x.push(design_row(spec.features, traj, &traj.a, t, Role::Outcome)?);
            y.push(next);
            rows.push(i);
        }
        let ones = vec![1.0; x.len()];
        let zeros = vec![0.0; x.len()];
        let reg = fit_logistic(&x, &y, &ones, &zeros, spec.max_iter, spec.ridge)?;

        let mut data = FluctuationData::default();
        let mut k = 0;
        for (i, traj) in batch.trajectories.iter().enumerate() {
            if traj.stop < t {
                continue;
            }
            let q_obs = reg.predict(
                &design_row(spec.features, traj, &traj.a, t, Role::Outcome)?,
                0.0,
            );
            let q_g = reg.predict(
                &design_row(
                    spec.features,
                    traj,
                    &fit.policy_actions[i],
                    t,
                    Role::Outcome,
                )?,
                0.0,
            );
            fit.q_hat[i][t - 1] = q_obs;
            fit.v_hat[i][t - 1] = q_g;
            if rows.get(k) == Some(&i) {
                let w = cc.i_t[i][t - 1];
                if w != 0.0 {
                    data.offset.push(logit(q_obs));
                    data.target.push(y[k]);
                    data.weight.push(w);
                }
                k += 1;
            }
        }
        eps[t - 1] = solve_fluctuation(&data);
    }

    let (result, _) = summarize(
        batch,
        &fit,
        &cc,
        &eps,
        Epsilon::PerTime(eps.clone()),
        tau,
        true,
    )?;
    let result: EstimateResult = match &scaler {
        Some(s) => unscale_result(&result, s),
        None => result,
    };
    let step_scores = step_scores(&fit, &cc, &eps);
    Ok(Targeted {
        method: Method::LtmleGlm,
        result,
        fd_error: None,
        step_scores,
        max_weight: cc.max_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design_width(features: FeatureMap, d_w: usize, d_l: usize, t: usize, role: Role) -> usize {
        match features {
            FeatureMap::CurrentLag => d_w + d_l + 2 + usize::from(role == Role::Outcome),
            FeatureMap::Saturated => 1 << saturated_vars(d_w, d_l, t, role),
        }
    }

    fn intercept(n: usize) -> Vec<Vec<f64>> {
        vec![vec![1.0]; n]
    }

    #[test]
    fn intercept_only_at_half() {
        let y = vec![0.5; 10];
        let f = fit_logistic(&intercept(10), &y, &[1.0; 10], &[0.0; 10], 100, 1e-8).unwrap();
        assert!(f.coef[0].abs() < 1e-10);
    }

    #[test]
    fn offset_already_optimal() {
        let off = [-1.0, 0.3, 2.0, 0.0];
        let y: Vec<f64> = off.iter().map(|&o| sigmoid(o)).collect();
        let f = fit_logistic(&intercept(4), &y, &[1.0; 4], &off, 100, 1e-8).unwrap();
        assert!(f.coef[0].abs() < 1e-8);
    }

    #[test]
    fn separable_data_stays_finite() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, i as f64 - 3.5]).collect();
        let y: Vec<f64> = (0..8).map(|i| if i < 4 { 0.0 } else { 1.0 }).collect();
        let f = fit_logistic(&x, &y, &[1.0; 8], &[0.0; 8], 100, 1e-8).unwrap();
        assert!(f.coef.iter().all(|c| c.is_finite()));
        assert!(f.separated);
    }

    #[test]
    fn matches_closed_form_log_odds() {
        // Two cells: weighted means 0.2 and 0.9 give coefficients logit(mean).
        let x = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let y = vec![0.0, 0.4, 0.8, 1.0];
        let f = fit_logistic(&x, &y, &[1.0; 4], &[0.0; 4], 100, 0.0).unwrap();
        assert!((f.coef[0] - logit(0.2)).abs() < 1e-8);
        assert!((f.coef[1] - logit(0.9)).abs() < 1e-8);
    }

    #[test]
    fn saturated_cells_are_one_hot() {
        let b = crate::dgp::gen_tabular_micro(5, 1).unwrap();
        let traj = &b.trajectories[0];
        let row = design_row(FeatureMap::Saturated, traj, &traj.a, 2, Role::Outcome).unwrap();
        assert_eq!(row.len(), 32);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
        assert_eq!(
            design_width(FeatureMap::Saturated, 1, 1, 2, Role::Treatment),
            16
        );
        let row = design_row(FeatureMap::CurrentLag, traj, &traj.a, 2, Role::Treatment).unwrap();
        assert_eq!(
            row.len(),
            design_width(FeatureMap::CurrentLag, 1, 1, 2, Role::Treatment)
        );
    }
}
