//! Synthetic data-generating processes and ground-truth evaluation of the
//! counterfactual mean `psi_0 = E_g[Y_T]`.
//!
//! Every subject is drawn from its own ChaCha8 stream (`set_stream(i)`), so a
//! trajectory depends only on `(seed, i)` and never on `n` or thread count.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::data::{
    apply_policy, Batch, DatasetHeader, History, OutcomeMode, PolicySpec, Trajectory,
};
use crate::error::{Error, Result};
use crate::tdht::FitOutputs;

/// Smallest Monte Carlo sample accepted by [`monte_carlo_truth`].
pub const MIN_MC_SAMPLES: usize = 1000;

/// Resampling attempts per trajectory before the complex generator gives up.
const MAX_RESAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    SimpleCont,
    SimpleSurv,
    Complex,
    Micro,
}

impl DgpKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "simple-cont" => Ok(Self::SimpleCont),
            "simple-surv" => Ok(Self::SimpleSurv),
            "complex" => Ok(Self::Complex),
            "micro" => Ok(Self::Micro),
            other => Err(Error::Config(format!("unknown dgp '{other}'"))),
        }
    }

    pub fn mode(self) -> OutcomeMode {
        match self {
            Self::SimpleCont => OutcomeMode::Continuous,
            _ => OutcomeMode::Survival,
        }
    }

    /// Policy the generator's benchmark targets.
    pub fn default_policy(self, h: usize) -> PolicySpec {
        match self {
            Self::Complex => PolicySpec::dgp_threshold(h),
            _ => PolicySpec::always_treat(),
        }
    }
}

fn default_p() -> usize {
    5
}

fn default_h() -> usize {
    1
}

/// Generator description without sample size or seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub tau: usize,
    /// Covariate dimension of the complex generator.
    #[serde(default = "default_p")]
    pub p: usize,
    /// Dependency length of the complex generator.
    #[serde(default = "default_h")]
    pub h: usize,
    /// Seed for the complex generator's structural parameters, held fixed
    /// across replications.
    #[serde(default)]
    pub param_seed: u64,
}

impl DgpSpec {
    pub fn simple_continuous(tau: usize) -> Self {
        Self::new(DgpKind::SimpleCont, tau)
    }

    pub fn simple_survival(tau: usize) -> Self {
        Self::new(DgpKind::SimpleSurv, tau)
    }

    pub fn complex(tau: usize, p: usize, h: usize) -> Self {
        Self {
            p,
            h,
            ..Self::new(DgpKind::Complex, tau)
        }
    }

    pub fn micro() -> Self {
        Self::new(DgpKind::Micro, 2)
    }

    pub fn new(kind: DgpKind, tau: usize) -> Self {
        Self {
            kind,
            tau,
            p: default_p(),
            h: default_h(),
            param_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if self.kind == DgpKind::Micro && self.tau != 2 {
            return Err(Error::Config("the micro generator has tau = 2".into()));
        }
        if self.kind == DgpKind::Complex && (self.p == 0 || self.h == 0) {
            return Err(Error::Config(
                "complex generator needs p >= 1 and h >= 1".into(),
            ));
        }
        Ok(())
    }

    fn header(&self, seed: u64) -> DatasetHeader {
        let (d_w, d_l) = match self.kind {
            DgpKind::SimpleCont | DgpKind::SimpleSurv | DgpKind::Micro => (1, 1),
            DgpKind::Complex => (0, self.p),
        };
        DatasetHeader {
            tau: self.tau,
            d_w,
            d_l,
            mode: self.kind.mode(),
            censoring: false,
            seed: Some(seed),
        }
    }

    pub fn default_policy(&self) -> PolicySpec {
        self.kind.default_policy(self.h)
    }
}

/// Structural coefficients `alpha_k, beta_k, gamma_k` for lags `k = 1..=h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ComplexParams {
    /// `alpha_k, beta_k ~ Normal(1/(k+1), sd 0.02)`, `gamma_k` uniform on {-1, 1}.
    pub fn draw(h: usize, param_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed);
        let (mut alpha, mut beta, mut gamma) = (Vec::new(), Vec::new(), Vec::new());
        for k in 1..=h {
            let law = Normal::new(1.0 / (k as f64 + 1.0), 0.02).expect("valid normal");
            alpha.push(law.sample(&mut rng));
            beta.push(law.sample(&mut rng));
            gamma.push(if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        }
        Self { alpha, beta, gamma }
    }
}

/// `(prod_j mean(L_j), mean(A))` over the last `window` entries of each
/// slice. An empty window has mean 0.
pub fn window_summaries(l: &[Vec<f64>], a: &[u8], window: usize) -> (f64, f64) {
    let lw = &l[l.len().saturating_sub(window)..];
    let aw = &a[a.len().saturating_sub(window)..];
    let d = l.first().map_or(0, Vec::len);
    let mut prod = 1.0;
    for j in 0..d {
        let mean = if lw.is_empty() {
            0.0
        } else {
            lw.iter().map(|v| v[j]).sum::<f64>() / lw.len() as f64
        };
        prod *= mean;
    }
    if lw.is_empty() {
        prod = 0.0;
    }
    let abar = if aw.is_empty() {
        0.0
    } else {
        aw.iter().map(|&x| f64::from(x)).sum::<f64>() / aw.len() as f64
    };
    (prod, abar)
}

fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + sd * z
}

/// Chooses between the natural draw and the policy's action.
fn intervene(
    policy: Option<&PolicySpec>,
    t: usize,
    w: &[f64],
    l: &[Vec<f64>],
    a: &[u8],
    y: &[f64],
    natural: u8,
) -> u8 {
    match policy {
        None => natural,
        Some(g) => g.action(&History { t, w, l, a, y }, natural),
    }
}

/// Copies the values at the last filled time over the remaining horizon.
fn freeze(l: &mut Vec<Vec<f64>>, a: &mut Vec<u8>, y: &mut Vec<f64>, tau: usize) {
    while a.len() < tau {
        l.push(l[l.len() - 1].clone());
        a.push(a[a.len() - 1]);
        y.push(y[y.len() - 1]);
    }
}

fn simple_trajectory(
    tau: usize,
    mode: OutcomeMode,
    rng: &mut ChaCha8Rng,
    policy: Option<&PolicySpec>,
) -> Trajectory {
    let w = vec![normal(rng, 0.0, 1.0)];
    let (mut l, mut a, mut y) = (
        Vec::with_capacity(tau),
        Vec::with_capacity(tau),
        Vec::with_capacity(tau),
    );
    for t in 1..=tau {
        let (lt, pa) = if t == 1 {
            let lt = normal(rng, 0.1 * w[0], 1.0);
            (lt, sigmoid(-0.5 * w[0] + lt))
        } else {
            let prev = f64::from(a[t - 2]);
            let lt = normal(rng, 0.1 * w[0] - 0.1 * prev, 1.0);
            (lt, sigmoid(-0.5 + 0.3 * w[0] + 0.3 * lt + 2.0 * prev))
        };
        l.push(vec![lt]);
        let natural = u8::from(rng.random_bool(pa));
        let at = intervene(policy, t, &w, &l, &a, &y, natural);
        a.push(at);
        let p = sigmoid(-3.0 + 0.2 * w[0] + 0.2 * lt - 2.0 * f64::from(at));
        let yt = if mode == OutcomeMode::Continuous && t > 1 {
            p
        } else {
            f64::from(u8::from(rng.random_bool(p)))
        };
        y.push(yt);
        if mode == OutcomeMode::Survival && yt == 1.0 {
            freeze(&mut l, &mut a, &mut y, tau);
            break;
        }
    }
    Trajectory::new(w, l, a, y, None, mode)
}

/// One complex-generator trajectory, or `None` when a `tan` pole produced a
/// non-finite value.
fn complex_attempt(
    spec: &DgpSpec,
    params: &ComplexParams,
    rng: &mut ChaCha8Rng,
    policy: Option<&PolicySpec>,
) -> Option<Trajectory> {
    let (tau, p, h) = (spec.tau, spec.p, spec.h);
    let w: Vec<f64> = Vec::new();
    let (mut l, mut a, mut y): (Vec<Vec<f64>>, Vec<u8>, Vec<f64>) =
        (Vec::new(), Vec::new(), Vec::new());
    for t in 1..=tau {
        let mut lt = vec![0.0; p];
        for (j, v) in lt.iter_mut().enumerate() {
            let mut x = 0.0;
            for k in 1..=h {
                // Values before t = 1 are 0.
                let (l_lag, a_lag) = if t > k {
                    (l[t - k - 1][j], f64::from(a[t - k - 1]))
                } else {
                    (0.0, 0.0)
                };
                x += params.alpha[k - 1] * l_lag
                    + params.beta[k - 1] * params.gamma[k - 1] * (2.0 * a_lag - 1.0);
            }
            *v = x.tanh() + normal(rng, 0.0, 0.1);
        }
        l.push(lt);
        let (lprod, abar) = window_summaries(&l, &a, h);
        let s = (lprod + abar).tan() + normal(rng, 0.0, 0.2);
        let natural = u8::from(sigmoid(s) + normal(rng, 0.0, 0.05) > 0.5);
        if !s.is_finite() {
            return None;
        }
        let at = intervene(policy, t, &w, &l, &a, &y, natural);
        a.push(at);
        let (lprod, abar) = window_summaries(&l, &a, h);
        let logit = (lprod - 0.7 * (abar - 0.5)).tan() - 4.5;
        if !logit.is_finite() || !l[t - 1].iter().all(|v| v.is_finite()) {
            return None;
        }
        let yt = f64::from(u8::from(rng.random_bool(sigmoid(logit))));
        y.push(yt);
        if yt == 1.0 {
            freeze(&mut l, &mut a, &mut y, tau);
            break;
        }
    }
    Some(Trajectory::new(w, l, a, y, None, OutcomeMode::Survival))
}

fn complex_trajectory(
    spec: &DgpSpec,
    params: &ComplexParams,
    rng: &mut ChaCha8Rng,
    policy: Option<&PolicySpec>,
) -> Result<(Trajectory, usize)> {
    for attempt in 0..MAX_RESAMPLES {
        if let Some(traj) = complex_attempt(spec, params, rng, policy) {
            if attempt > 0 {
                log::debug!("complex trajectory resampled {attempt} time(s)");
            }
            return Ok((traj, attempt));
        }
    }
    Err(Error::NonFinite(format!(
        "complex generator produced no finite trajectory in {MAX_RESAMPLES} attempts"
    )))
}

/// Coefficient table of the two-step all-binary generator. Every
/// conditional probability lies in (0.05, 0.95).
pub mod micro {
    use crate::autodiff::sigmoid;

    pub const P_W: f64 = 0.5;

    pub fn p_l1(w: f64) -> f64 {
        sigmoid(-0.2 + 0.6 * w)
    }

    pub fn p_a1(w: f64, l1: f64) -> f64 {
        sigmoid(-0.3 + 0.5 * w + 0.7 * l1)
    }

    pub fn p_y1(w: f64, l1: f64, a1: f64) -> f64 {
        sigmoid(-2.0 + 0.4 * w + 0.5 * l1 - 0.6 * a1)
    }

    pub fn p_l2(w: f64, l1: f64, a1: f64) -> f64 {
        sigmoid(-0.2 + 0.4 * w + 0.6 * l1 - 0.5 * a1)
    }

    pub fn p_a2(w: f64, l2: f64, a1: f64) -> f64 {
        sigmoid(-0.4 + 0.3 * w + 0.6 * l2 + 0.8 * a1)
    }

    pub fn p_y2(w: f64, l1: f64, l2: f64, a1: f64, a2: f64) -> f64 {
        sigmoid(-1.5 + 0.3 * w + 0.4 * l1 + 0.6 * l2 - 0.7 * a2 - 0.3 * a1)
    }
}

fn bern(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    f64::from(u8::from(rng.random_bool(p)))
}

fn micro_trajectory(rng: &mut ChaCha8Rng, policy: Option<&PolicySpec>) -> Trajectory {
    let w = vec![bern(rng, micro::P_W)];
    let l1 = bern(rng, micro::p_l1(w[0]));
    let mut l = vec![vec![l1]];
    let nat1 = u8::from(rng.random_bool(micro::p_a1(w[0], l1)));
    let a1 = intervene(policy, 1, &w, &l, &[], &[], nat1);
    let y1 = bern(rng, micro::p_y1(w[0], l1, f64::from(a1)));
    let mut a = vec![a1];
    let mut y = vec![y1];
    if y1 == 1.0 {
        freeze(&mut l, &mut a, &mut y, 2);
    } else {
        let l2 = bern(rng, micro::p_l2(w[0], l1, f64::from(a1)));
        l.push(vec![l2]);
        let nat2 = u8::from(rng.random_bool(micro::p_a2(w[0], l2, f64::from(a1))));
        let a2 = intervene(policy, 2, &w, &l, &a, &y, nat2);
        a.push(a2);
        y.push(bern(
            rng,
            micro::p_y2(w[0], l1, l2, f64::from(a1), f64::from(a2)),
        ));
    }
    Trajectory::new(w, l, a, y, None, OutcomeMode::Survival)
}

/// Draws subject `index`. With `policy` set, treatments are replaced by the
/// policy's actions on the generated history. Returns the trajectory and
/// the number of resampled attempts.
pub fn simulate_subject(
    spec: &DgpSpec,
    params: Option<&ComplexParams>,
    seed: u64,
    index: u64,
    policy: Option<&PolicySpec>,
) -> Result<(Trajectory, usize)> {
    let mut rng = subject_rng(seed, index);
    match spec.kind {
        DgpKind::SimpleCont => Ok((
            simple_trajectory(spec.tau, OutcomeMode::Continuous, &mut rng, policy),
            0,
        )),
        DgpKind::SimpleSurv => Ok((
            simple_trajectory(spec.tau, OutcomeMode::Survival, &mut rng, policy),
            0,
        )),
        DgpKind::Micro => Ok((micro_trajectory(&mut rng, policy), 0)),
        DgpKind::Complex => {
            let owned;
            let params = match params {
                Some(p) => p,
                None => {
                    owned = ComplexParams::draw(spec.h, spec.param_seed);
                    &owned
                }
            };
            complex_trajectory(spec, params, &mut rng, policy)
        }
    }
}

/// Observational batch of `n` subjects.
pub fn generate(spec: &DgpSpec, n: usize, seed: u64) -> Result<Batch> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let params =
        (spec.kind == DgpKind::Complex).then(|| ComplexParams::draw(spec.h, spec.param_seed));
    let draws: Vec<(Trajectory, usize)> = (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_subject(spec, params.as_ref(), seed, i, None))
        .collect::<Result<_>>()?;
    let resampled = draws.iter().map(|d| d.1).sum();
    if resampled > 0 {
        log::info!("{resampled} complex trajectories resampled for non-finite values");
    }
    let mut batch = Batch::new(spec.header(seed), draws.into_iter().map(|d| d.0).collect());
    batch.resampled = resampled;
    Ok(batch)
}

pub fn gen_simple_continuous(n: usize, tau: usize, seed: u64) -> Result<Batch> {
    generate(&DgpSpec::simple_continuous(tau), n, seed)
}

pub fn gen_simple_survival(n: usize, tau: usize, seed: u64) -> Result<Batch> {
    generate(&DgpSpec::simple_survival(tau), n, seed)
}

pub fn gen_complex_survival(n: usize, tau: usize, p: usize, h: usize, seed: u64) -> Result<Batch> {
    generate(&DgpSpec::complex(tau, p, h), n, seed)
}

pub fn gen_tabular_micro(n: usize, seed: u64) -> Result<Batch> {
    generate(&DgpSpec::micro(), n, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthEstimate {
    pub psi0: f64,
    pub mc_se: f64,
    /// Monte Carlo sample size; 0 for exact enumeration.
    pub m: usize,
}

/// Mean and standard error of `m` draws of `f`, one ChaCha8 stream per draw.
pub fn monte_carlo_mean<F>(m: usize, seed: u64, f: F) -> Result<TruthEstimate>
where
    F: Fn(u64, &mut ChaCha8Rng) -> Result<f64> + Sync,
{
    if m < MIN_MC_SAMPLES {
        return Err(Error::Config(format!(
            "Monte Carlo truth needs m >= {MIN_MC_SAMPLES}, got {m}"
        )));
    }
    let values: Vec<f64> = (0..m as u64)
        .into_par_iter()
        .map(|i| f(i, &mut subject_rng(seed, i)))
        .collect::<Result<_>>()?;
    let mean = values.iter().sum::<f64>() / m as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    Ok(TruthEstimate {
        psi0: mean,
        mc_se: (var / m as f64).sqrt(),
        m,
    })
}

/// `E_g[Y_T]` by simulating under the intervention `A_t = g_t(history)`.
pub fn monte_carlo_truth(
    spec: &DgpSpec,
    g: &PolicySpec,
    m: usize,
    seed: u64,
) -> Result<TruthEstimate> {
    spec.validate()?;
    let params =
        (spec.kind == DgpKind::Complex).then(|| ComplexParams::draw(spec.h, spec.param_seed));
    monte_carlo_mean(m, seed, |i, _| {
        let (traj, _) = simulate_subject(spec, params.as_ref(), seed, i, Some(g))?;
        Ok(traj.final_outcome())
    })
}

/// Exact `psi_0` for the micro generator by enumerating all binary paths.
pub fn exact_truth(g: &PolicySpec) -> TruthEstimate {
    TruthEstimate {
        psi0: MicroOracle::new(g.clone()).psi0(),
        mc_se: 0.0,
        m: 0,
    }
}

/// True nuisance functions of the micro generator under a policy.
#[derive(Clone, Debug)]
pub struct MicroOracle {
    pub g: PolicySpec,
}

fn micro_action(g: &PolicySpec, t: usize, w: f64, l: &[f64], a: &[u8], y: &[f64]) -> u8 {
    let wv = [w];
    let lv: Vec<Vec<f64>> = l.iter().map(|&x| vec![x]).collect();
    // Replay has no observed action here; it only arises for observed paths.
    g.action(
        &History {
            t,
            w: &wv,
            l: &lv,
            a,
            y,
        },
        a.last().copied().unwrap_or(0),
    )
}

impl MicroOracle {
    pub fn new(g: PolicySpec) -> Self {
        Self { g }
    }

    /// `P(A_t = 1 | past)`.
    pub fn pi(&self, t: usize, w: f64, l1: f64, a1: f64, l2: f64) -> f64 {
        match t {
            1 => micro::p_a1(w, l1),
            _ => micro::p_a2(w, l2, a1),
        }
    }

    /// True `Q_2 = P(Y_2 = 1 | W, L_1, A_1, Y_1 = 0, L_2, A_2)`.
    pub fn q2(&self, w: f64, l1: f64, a1: f64, l2: f64, a2: f64) -> f64 {
        micro::p_y2(w, l1, l2, a1, a2)
    }

    /// True `Q_1 = E_g[Y_2 | W, L_1, A_1]`.
    pub fn q1(&self, w: f64, l1: f64, a1: f64) -> f64 {
        let py1 = micro::p_y1(w, l1, a1);
        let mut future = 0.0;
        for l2 in [0.0, 1.0] {
            let pl2 = micro::p_l2(w, l1, a1);
            let prob = if l2 == 1.0 { pl2 } else { 1.0 - pl2 };
            let a2 = micro_action(&self.g, 2, w, &[l1, l2], &[a1 as u8], &[0.0]);
            future += prob * self.q2(w, l1, a1, l2, f64::from(a2));
        }
        py1 + (1.0 - py1) * future
    }

    /// True `V_1 = Q_1` at the policy's first action.
    pub fn v1(&self, w: f64, l1: f64) -> f64 {
        let a1 = micro_action(&self.g, 1, w, &[l1], &[], &[]);
        self.q1(w, l1, f64::from(a1))
    }

    /// True `V_2` given an uncensored, event-free first step.
    pub fn v2(&self, w: f64, l1: f64, a1: f64, l2: f64) -> f64 {
        let a2 = micro_action(&self.g, 2, w, &[l1, l2], &[a1 as u8], &[0.0]);
        self.q2(w, l1, a1, l2, f64::from(a2))
    }

    /// True nuisance values on an observed micro batch, shaped like a model fit.
    pub fn fit_outputs(&self, batch: &Batch) -> Result<FitOutputs> {
        if batch.tau() != 2 || batch.header.d_w != 1 || batch.header.d_l != 1 {
            return Err(Error::Data("oracle fit needs a micro batch".into()));
        }
        let n = batch.n();
        let mut out = FitOutputs {
            pi_hat: Vec::with_capacity(n),
            q_hat: Vec::with_capacity(n),
            v_hat: Vec::with_capacity(n),
            lambda_c_hat: None,
            stop: Vec::with_capacity(n),
            policy_actions: Vec::with_capacity(n),
        };
        for traj in &batch.trajectories {
            let w = traj.w[0];
            let (l1, l2) = (traj.l[0][0], traj.l[1][0]);
            let (a1, a2) = (f64::from(traj.a[0]), f64::from(traj.a[1]));
            let yt = traj.final_outcome();
            let (q2, v2) = if traj.stop > 1 {
                (self.q2(w, l1, a1, l2, a2), self.v2(w, l1, a1, l2))
            } else {
                (0.5, yt)
            };
            out.pi_hat
                .push(vec![self.pi(1, w, l1, a1, l2), self.pi(2, w, l1, a1, l2)]);
            out.q_hat.push(vec![self.q1(w, l1, a1), q2]);
            out.v_hat.push(vec![self.v1(w, l1), v2, yt]);
            out.stop.push(traj.stop);
            out.policy_actions.push(apply_policy(traj, &self.g)?);
        }
        Ok(out)
    }

    pub fn psi0(&self) -> f64 {
        let mut psi = 0.0;
        for w in [0.0, 1.0] {
            for l1 in [0.0, 1.0] {
                let pl1 = micro::p_l1(w);
                let prob = if l1 == 1.0 { pl1 } else { 1.0 - pl1 };
                psi += micro::P_W * prob * self.v1(w, l1);
            }
        }
        psi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate;

    #[test]
    fn logistic_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-5.0) - 0.006692850924284856).abs() < 1e-15);
        assert!((sigmoid(-3.0) - 0.04742587317756678).abs() < 1e-15);
        assert!((sigmoid(-4.5) - 0.01098694263059318).abs() < 1e-15);
    }

    #[test]
    fn generators_are_deterministic_and_valid() {
        for spec in [
            DgpSpec::simple_continuous(5),
            DgpSpec::simple_survival(5),
            DgpSpec::complex(5, 3, 2),
            DgpSpec::micro(),
        ] {
            let a = generate(&spec, 50, 11).unwrap();
            let b = generate(&spec, 50, 11).unwrap();
            assert_eq!(a, b);
            assert!(validate(&a).is_empty(), "{:?}", validate(&a));
        }
    }

    #[test]
    fn subject_does_not_depend_on_n() {
        let spec = DgpSpec::simple_survival(6);
        let small = generate(&spec, 3, 5).unwrap();
        let large = generate(&spec, 30, 5).unwrap();
        assert_eq!(small.trajectories[..], large.trajectories[..3]);
    }

    #[test]
    fn gamma_is_a_sign() {
        let p = ComplexParams::draw(8, 3);
        assert!(p.gamma.iter().all(|&g| g == 1.0 || g == -1.0));
    }

    #[test]
    fn window_summaries_reads_the_tail() {
        let l = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(window_summaries(&l, &[1, 0], 1), (12.0, 0.0));
        assert_eq!(window_summaries(&l, &[1, 0], 2), (6.0, 0.5));
        assert_eq!(window_summaries(&l, &[], 2), (6.0, 0.0));
    }

    #[test]
    fn mc_requires_enough_samples() {
        assert!(monte_carlo_truth(&DgpSpec::micro(), &PolicySpec::always_treat(), 10, 0).is_err());
    }

    #[test]
    fn zero_outcome_has_zero_truth() {
        let t = monte_carlo_mean(2000, 1, |_, _| Ok(0.0)).unwrap();
        assert_eq!((t.psi0, t.mc_se), (0.0, 0.0));
    }

    #[test]
    fn micro_enumeration_is_a_probability() {
        let psi = exact_truth(&PolicySpec::always_treat()).psi0;
        assert!(psi > 0.0 && psi < 1.0);
        let never = exact_truth(&PolicySpec::never_treat()).psi0;
        assert!(never > psi, "treatment is protective in the micro table");
    }
}
