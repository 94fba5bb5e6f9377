//! Targeting of the initial fit along the efficient influence function.
//!
//! All routines act on precomputed head outputs ([`FitOutputs`]); a
//! fluctuation `eps` only shifts `Q_t` and `V_t` on the logit scale, so no
//! forward pass is needed while solving for it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_value, clamp_prob, sigmoid};
use crate::data::{Batch, OutcomeMode, OutcomeScaler};
use crate::error::{Error, Result};
use crate::tdht::FitOutputs;

pub const Z_95: f64 = 1.96;
/// Round cap for common-fluctuation targeting. Each round shrinks
/// `P_n D*` by a factor of roughly `1 - 1/tau`.
pub const DEFAULT_MAX_ITER: usize = 500;
/// Initial search interval for a fluctuation.
pub const EPS_BOUND: f64 = 10.0;
/// Widest interval tried when the score keeps one sign at the bound.
pub const EPS_BOUND_MAX: f64 = 50.0;
pub const EPS_TOL: f64 = 1e-10;
/// Step for the finite-difference check of the partial-loss derivative.
pub const FD_STEP: f64 = 1e-5;

pub fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

/// `sigma(logit(q) + eps)`.
pub fn fluctuate(q: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        return q;
    }
    sigmoid(logit(q) + eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Truncation {
    None,
    /// Cap at this quantile of the positive weights.
    Quantile(f64),
    /// Cap at a fixed value.
    Threshold(f64),
}

/// `I_t` per subject (`[i][t - 1]`), zero after `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CleverCovariates {
    pub i_t: Vec<Vec<f64>>,
    pub max_weight: f64,
    pub truncated: usize,
}

/// `I_t = prod_{s <= t} 1{A_s = a^g_s} / pi_s(A_s)`, with the factor
/// `1{C_s = 0} / (1 - lambda^c_s)` when censoring is modeled.
pub fn clever_covariates(
    batch: &Batch,
    fit: &FitOutputs,
    truncation: Truncation,
) -> Result<CleverCovariates> {
    let tau = batch.tau();
    let mut i_t = Vec::with_capacity(batch.n());
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let mut row = vec![0.0; tau];
        let mut w = 1.0;
        for t in 0..traj.stop {
            let a = traj.a[t];
            if a != fit.policy_actions[i][t] {
                w = 0.0;
            } else {
                let p1 = clamp_prob(fit.pi_hat[i][t]);
                w /= if a == 1 { p1 } else { 1.0 - p1 };
            }
            if let (Some(c), Some(lc)) = (&traj.c, &fit.lambda_c_hat) {
                if c[t] == 1 {
                    w = 0.0;
                } else {
                    w /= 1.0 - clamp_prob(lc[i][t]);
                }
            }
            row[t] = w;
        }
        i_t.push(row);
    }
    let cap = match truncation {
        Truncation::None => f64::INFINITY,
        Truncation::Threshold(x) => x,
        Truncation::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!(
                    "truncation quantile {q} outside [0, 1]"
                )));
            }
            let mut pos: Vec<f64> = i_t.iter().flatten().copied().filter(|&x| x > 0.0).collect();
            if pos.is_empty() {
                f64::INFINITY
            } else {
                pos.sort_by(f64::total_cmp);
                pos[((pos.len() - 1) as f64 * q).round() as usize]
            }
        }
    };
    let mut truncated = 0;
    let mut max_weight = 0.0f64;
    for x in i_t.iter_mut().flatten() {
        if *x > cap {
            *x = cap;
            truncated += 1;
        }
        max_weight = max_weight.max(*x);
    }
    if !max_weight.is_finite() {
        return Err(Error::NonFinite("clever covariate".into()));
    }
    Ok(CleverCovariates {
        i_t,
        max_weight,
        truncated,
    })
}

/// Fluctuation per time step (`eps[t - 1]`).
pub type EpsPath = Vec<f64>;

/// `Q_{t, eps_t}` on the observed sequence.
fn q_eps(fit: &FitOutputs, i: usize, t: usize, eps: &[f64]) -> f64 {
    fluctuate(fit.q_hat[i][t], eps[t])
}

/// `V_{t+1, eps_{t+1}}` for 0-based `t`: the fluctuated policy value for
/// `t + 1 < T`, else `Y_T`.
fn v_next(fit: &FitOutputs, i: usize, t: usize, eps: &[f64]) -> f64 {
    let next = t + 1;
    if next < fit.stop[i] {
        fluctuate(fit.v_hat[i][next], eps[next])
    } else {
        fit.v_hat[i][fit.stop[i]]
    }
}

fn v1(fit: &FitOutputs, i: usize, eps: &[f64]) -> f64 {
    fluctuate(fit.v_hat[i][0], eps[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EifValues {
    pub d_star: Vec<f64>,
    pub psi_ref: f64,
}

impl EifValues {
    pub fn mean(&self) -> f64 {
        self.d_star.iter().sum::<f64>() / self.d_star.len() as f64
    }

    /// `sqrt(P_n D*^2 / n)`.
    pub fn sigma(&self) -> f64 {
        let n = self.d_star.len() as f64;
        (self.d_star.iter().map(|d| d * d).sum::<f64>() / n / n).sqrt()
    }
}

/// `D* = (V_1 - psi) + sum_{t <= T} I_t (V_{t+1} - Q_t)` per subject.
pub fn eif(
    fit: &FitOutputs,
    cc: &CleverCovariates,
    eps: &[f64],
    psi: f64,
    mode: OutcomeMode,
) -> Result<EifValues> {
    if mode == OutcomeMode::Survival && !(0.0..=1.0).contains(&psi) {
        return Err(Error::Estimation(format!("psi {psi} outside [0, 1]")));
    }
    let d_star = (0..fit.n())
        .map(|i| {
            let mut d = v1(fit, i, eps) - psi;
            for t in 0..fit.stop[i] {
                let w = cc.i_t[i][t];
                if w != 0.0 {
                    d += w * (v_next(fit, i, t, eps) - q_eps(fit, i, t, eps));
                }
            }
            d
        })
        .collect();
    Ok(EifValues {
        d_star,
        psi_ref: psi,
    })
}

/// Weighted observations of a logistic fluctuation with fixed offsets.
#[derive(Clone, Debug, Default)]
pub struct FluctuationData {
    pub offset: Vec<f64>,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

impl FluctuationData {
    /// Adds one term; zero weights are dropped.
    pub fn push(&mut self, q: f64, y: f64, w: f64) {
        if w != 0.0 {
            self.offset.push(logit(q));
            self.target.push(y);
            self.weight.push(w);
        }
    }

    /// `sum w (y - sigma(offset + eps))`, the negative derivative of the loss.
    pub fn score(&self, eps: f64) -> f64 {
        self.offset
            .iter()
            .zip(&self.target)
            .zip(&self.weight)
            .map(|((o, y), w)| w * (y - sigmoid(o + eps)))
            .sum()
    }

    /// `sum w p (1 - p)`, the second derivative of the loss.
    pub fn info(&self, eps: f64) -> f64 {
        self.offset
            .iter()
            .zip(&self.weight)
            .map(|(o, w)| {
                let p = sigmoid(o + eps);
                w * p * (1.0 - p)
            })
            .sum()
    }

    /// `sum w bce(sigma(offset + eps), y)`.
    pub fn loss(&self, eps: f64) -> f64 {
        self.offset
            .iter()
            .zip(&self.target)
            .zip(&self.weight)
            .map(|((o, y), w)| w * bce_value(sigmoid(o + eps), *y))
            .sum()
    }
}

/// Minimizer of the weighted logistic loss in the single shift `eps`.
///
/// Safeguarded Newton inside a sign-changing bracket, falling back to
/// bisection. The bracket starts at `[-10, 10]` and widens to `[-50, 50]`
/// when the score keeps one sign. Zero total weight gives `eps = 0`.
pub fn solve_fluctuation(data: &FluctuationData) -> f64 {
    let total: f64 = data.weight.iter().sum();
    if total == 0.0 || data.weight.is_empty() {
        return 0.0;
    }
    let (mut lo, mut hi) = (-EPS_BOUND, EPS_BOUND);
    while data.score(hi) > 0.0 && hi < EPS_BOUND_MAX {
        hi = (hi * 2.0).min(EPS_BOUND_MAX);
    }
    while data.score(lo) < 0.0 && lo > -EPS_BOUND_MAX {
        lo = (lo * 2.0).max(-EPS_BOUND_MAX);
    }
    if data.score(hi) > 0.0 {
        log::warn!("fluctuation score positive at eps = {hi}; returning the bound");
        return hi;
    }
    if data.score(lo) < 0.0 {
        log::warn!("fluctuation score negative at eps = {lo}; returning the bound");
        return lo;
    }
    let mut eps = 0.0f64.clamp(lo, hi);
    for _ in 0..200 {
        let s = data.score(eps);
        if s == 0.0 {
            return eps;
        }
        if s > 0.0 {
            lo = eps;
        } else {
            hi = eps;
        }
        let info = data.info(eps);
        let newton = eps + s / info;
        let next = if info > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - eps).abs() <= EPS_TOL || hi - lo <= EPS_TOL {
            return next;
        }
        eps = next;
    }
    eps
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Plugin,
    Td,
    Seq,
    LtmleGlm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Plugin => "plugin",
            Method::Td => "td",
            Method::Seq => "seq",
            Method::LtmleGlm => "ltmle-glm",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "plugin" | "none" => Ok(Method::Plugin),
            "td" => Ok(Method::Td),
            "seq" => Ok(Method::Seq),
            "ltmle-glm" => Ok(Method::LtmleGlm),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Epsilon {
    Common(f64),
    PerTime(Vec<f64>),
}

impl Epsilon {
    /// Representative scalar: the common value or the first-step value.
    pub fn first(&self) -> f64 {
        match self {
            Epsilon::Common(e) => *e,
            Epsilon::PerTime(v) => v.first().copied().unwrap_or(0.0),
        }
    }
}

/// Point estimate with its influence-function standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub psi_hat: f64,
    pub sigma_hat: f64,
    pub ci: [f64; 2],
    pub epsilon: Epsilon,
    pub pn_dstar: f64,
    pub certificate: bool,
    pub iterations: usize,
}

/// Estimate plus diagnostics that do not belong in the public result.
#[derive(Clone, Debug, PartialEq)]
pub struct Targeted {
    pub method: Method,
    pub result: EstimateResult,
    /// `|fd - an| / max(1, |an|)` for the partial-loss derivative at the
    /// accepted fluctuation (common-fluctuation targeting only).
    pub fd_error: Option<f64>,
    /// `P_n 1{T >= t} I_t (V_{t+1} - Q_t)` at the solved fluctuations.
    pub step_scores: Vec<f64>,
    pub max_weight: f64,
}

/// `psi_hat = P_n V_{1, eps}` with `sigma_hat` from `D*` centered at it.
pub fn summarize(
    batch: &Batch,
    fit: &FitOutputs,
    cc: &CleverCovariates,
    eps: &[f64],
    epsilon: Epsilon,
    iterations: usize,
    certificate_required: bool,
) -> Result<(EstimateResult, EifValues)> {
    let n = fit.n();
    if n < 2 {
        return Err(Error::Estimation(format!(
            "need at least 2 subjects, got {n}"
        )));
    }
    let psi = (0..n).map(|i| v1(fit, i, eps)).sum::<f64>() / n as f64;
    let d = eif(fit, cc, eps, psi, batch.mode())?;
    let sigma = d.sigma();
    let pn = d.mean();
    let certificate = certificate_required && pn.abs() < sigma / (n as f64).ln();
    Ok((
        EstimateResult {
            psi_hat: psi,
            sigma_hat: sigma,
            ci: [psi - Z_95 * sigma, psi + Z_95 * sigma],
            epsilon,
            pn_dstar: pn.abs(),
            certificate,
            iterations,
        },
        d,
    ))
}

/// Maps an estimate on the `[0, 1]` scale back to outcome units.
pub fn unscale_result(r: &EstimateResult, scaler: &OutcomeScaler) -> EstimateResult {
    let (psi, sigma) = scaler.unscale_estimate(r.psi_hat, r.sigma_hat);
    let range = scaler.hi - scaler.lo;
    EstimateResult {
        psi_hat: psi,
        sigma_hat: sigma,
        ci: [psi - Z_95 * sigma, psi + Z_95 * sigma],
        pn_dstar: r.pn_dstar * range,
        ..r.clone()
    }
}

/// Plug-in estimate `P_n V_1` without fluctuation. The certificate reports
/// whether the untargeted fit already satisfies the stopping rule.
pub fn plugin(batch: &Batch, fit: &FitOutputs, cc: &CleverCovariates) -> Result<Targeted> {
    let eps = vec![0.0; fit.tau()];
    let (result, _) = summarize(batch, fit, cc, &eps, Epsilon::Common(0.0), 0, true)?;
    Ok(Targeted {
        method: Method::Plugin,
        result,
        fd_error: None,
        step_scores: step_scores(fit, cc, &eps),
        max_weight: cc.max_weight,
    })
}

/// Pooled data for the common-fluctuation loss
/// `sum_i sum_{t <= T} I_t bce(Q_{t, e}, V_{t+1, eps_v})` with `V` fixed.
fn pooled_data(fit: &FitOutputs, cc: &CleverCovariates, eps_v: f64) -> FluctuationData {
    let ev = vec![eps_v; fit.tau()];
    let mut data = FluctuationData::default();
    for i in 0..fit.n() {
        for t in 0..fit.stop[i] {
            data.push(fit.q_hat[i][t], v_next(fit, i, t, &ev), cc.i_t[i][t]);
        }
    }
    data
}

/// `P_n L*(Q_e, V_{eps_v})`.
pub fn partial_loss(fit: &FitOutputs, cc: &CleverCovariates, e: f64, eps_v: f64) -> f64 {
    pooled_data(fit, cc, eps_v).loss(e) / fit.n() as f64
}

/// Central difference of `e -> P_n L*(Q_e, V_eps)` at `e = eps`. The
/// analytic value is `-P_n D*(Q_eps)` when `D*` is centered at `P_n V_{1, eps}`.
pub fn partial_loss_derivative(fit: &FitOutputs, cc: &CleverCovariates, eps: f64) -> f64 {
    let data = pooled_data(fit, cc, eps);
    (data.loss(eps + FD_STEP) - data.loss(eps - FD_STEP)) / (2.0 * FD_STEP) / fit.n() as f64
}

/// `P_n 1{T >= t} I_t (V_{t+1} - Q_t)` per step at the fluctuations `eps`.
pub fn step_scores(fit: &FitOutputs, cc: &CleverCovariates, eps: &[f64]) -> Vec<f64> {
    let n = fit.n() as f64;
    (0..fit.tau())
        .map(|t| {
            (0..fit.n())
                .filter(|&i| fit.stop[i] > t)
                .map(|i| cc.i_t[i][t] * (v_next(fit, i, t, eps) - q_eps(fit, i, t, eps)))
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Common-fluctuation targeting: repeat the one-dimensional argmin with
/// `V` held at the previous fluctuation until
/// `|P_n D*| < sigma_hat / ln n` or `max_iter` rounds.
pub fn td_targeting(
    batch: &Batch,
    fit: &FitOutputs,
    cc: &CleverCovariates,
    max_iter: usize,
) -> Result<Targeted> {
    let tau = fit.tau();
    let all_zero = cc.i_t.iter().flatten().all(|&w| w == 0.0);
    if all_zero {
        log::warn!("no subject follows the policy; returning the plug-in estimate");
        let mut out = plugin(batch, fit, cc)?;
        out.method = Method::Td;
        out.result.certificate = false;
        return Ok(out);
    }
    let mut eps = 0.0;
    let mut iterations = 0;
    loop {
        iterations += 1;
        eps = solve_fluctuation(&pooled_data(fit, cc, eps));
        let path = vec![eps; tau];
        let (result, d) = summarize(
            batch,
            fit,
            cc,
            &path,
            Epsilon::Common(eps),
            iterations,
            true,
        )?;
        if result.certificate || iterations >= max_iter {
            if !result.certificate {
                log::warn!("targeting stopped after {iterations} iterations without meeting the stopping rule");
            }
            let an = -d.mean();
            let fd_error = (partial_loss_derivative(fit, cc, eps) - an).abs() / an.abs().max(1.0);
            return Ok(Targeted {
                method: Method::Td,
                result,
                fd_error: Some(fd_error),
                step_scores: step_scores(fit, cc, &path),
                max_weight: cc.max_weight,
            });
        }
    }
}

/// Backward sequential targeting with one fluctuation per step, each fitted
/// among subjects still at risk (`T >= t`) against the already targeted
/// `V_{t+1}`.
pub fn seq_targeting(batch: &Batch, fit: &FitOutputs, cc: &CleverCovariates) -> Result<Targeted> {
    let tau = fit.tau();
    let mut eps = vec![0.0; tau];
    for t in (0..tau).rev() {
        let mut data = FluctuationData::default();
        for i in 0..fit.n() {
            if fit.stop[i] > t {
                data.push(fit.q_hat[i][t], v_next(fit, i, t, &eps), cc.i_t[i][t]);
            }
        }
        eps[t] = solve_fluctuation(&data);
    }
    let (result, _) = summarize(
        batch,
        fit,
        cc,
        &eps,
        Epsilon::PerTime(eps.clone()),
        tau,
        true,
    )?;
    Ok(Targeted {
        method: Method::Seq,
        result,
        fd_error: None,
        step_scores: step_scores(fit, cc, &eps),
        max_weight: cc.max_weight,
    })
}

/// Runs one targeting method on a fit.
pub fn estimate(
    batch: &Batch,
    fit: &FitOutputs,
    method: Method,
    truncation: Truncation,
) -> Result<Targeted> {
    let cc = clever_covariates(batch, fit, truncation)?;
    match method {
        Method::Plugin => plugin(batch, fit, &cc),
        Method::Td => td_targeting(batch, fit, &cc, DEFAULT_MAX_ITER),
        Method::Seq => seq_targeting(batch, fit, &cc),
        Method::LtmleGlm => Err(Error::Config(
            "ltmle-glm does not target a transformer fit".into(),
        )),
    }
}
