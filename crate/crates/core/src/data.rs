//! Longitudinal records `O = (W, L_1, A_1, [C_1,] Y_1, ..., L_tau, A_tau, [C_tau,] Y_tau)`,
//! treatment policies and outcome rescaling.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of treatment levels. Only binary treatments are supported.
pub const BINARY_ACTIONS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeMode {
    /// Binary absorbing outcome; the process stops at the first event.
    Survival,
    /// Outcome bounded in a known range; no stopping before `tau`.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub tau: usize,
    pub d_w: usize,
    pub d_l: usize,
    pub mode: OutcomeMode,
    pub censoring: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// One subject. Time-indexed vectors have length `tau`; index `t - 1`
/// holds time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub w: Vec<f64>,
    pub l: Vec<Vec<f64>>,
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    pub c: Option<Vec<u8>>,
    /// Stopping time `T` in `1..=tau`.
    pub stop: usize,
}

impl Trajectory {
    /// Builds a trajectory and derives its stopping time.
    pub fn new(
        w: Vec<f64>,
        l: Vec<Vec<f64>>,
        a: Vec<u8>,
        y: Vec<f64>,
        c: Option<Vec<u8>>,
        mode: OutcomeMode,
    ) -> Self {
        let mut traj = Self {
            w,
            l,
            a,
            y,
            c,
            stop: 0,
        };
        traj.stop = stopping_time(&traj, mode);
        traj
    }

    pub fn tau(&self) -> usize {
        self.a.len()
    }

    /// Final observed outcome `Y_T`.
    pub fn final_outcome(&self) -> f64 {
        self.y[self.stop - 1]
    }

    /// Whether the trajectory ends by censoring.
    pub fn censored(&self) -> bool {
        self.c.as_ref().is_some_and(|c| c[self.stop - 1] == 1)
    }
}

/// `min{t : Y_t = 1 or C_t = 1}` in survival mode, `min{t : C_t = 1}` in
/// continuous mode, else `tau`.
pub fn stopping_time(traj: &Trajectory, mode: OutcomeMode) -> usize {
    let tau = traj.a.len();
    for t in 0..tau {
        let event = mode == OutcomeMode::Survival && traj.y[t] >= 1.0;
        let censored = traj.c.as_ref().is_some_and(|c| c[t] == 1);
        if event || censored {
            return t + 1;
        }
    }
    tau
}

/// `n` subjects sharing `tau` and covariate dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
    pub action_levels: usize,
    /// Trajectories redrawn by a generator because of non-finite values.
    pub resampled: usize,
}

impl Batch {
    pub fn new(header: DatasetHeader, trajectories: Vec<Trajectory>) -> Self {
        Self {
            header,
            trajectories,
            action_levels: BINARY_ACTIONS,
            resampled: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn tau(&self) -> usize {
        self.header.tau
    }

    pub fn mode(&self) -> OutcomeMode {
        self.header.mode
    }

    /// Batch restricted to the given subject indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            header: self.header.clone(),
            trajectories: idx.iter().map(|&i| self.trajectories[i].clone()).collect(),
            action_levels: self.action_levels,
            resampled: 0,
        }
    }
}

/// History available to a treatment rule at time `t` (1-based):
/// `(w, l_{1:t}, a_{1:t-1}, y_{1:t-1})`.
pub struct History<'a> {
    pub t: usize,
    pub w: &'a [f64],
    pub l: &'a [Vec<f64>],
    pub a: &'a [u8],
    pub y: &'a [f64],
}

type RuleFn = dyn Fn(&History<'_>) -> u8 + Send + Sync;

#[derive(Clone)]
enum PolicyRule {
    Static(u8),
    Replay,
    Threshold { window: usize },
    Custom(Arc<RuleFn>),
}

/// Deterministic dynamic treatment rule.
#[derive(Clone)]
pub struct PolicySpec {
    label: String,
    rule: PolicyRule,
}

impl fmt::Debug for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicySpec")
            .field("label", &self.label)
            .finish()
    }
}

impl PolicySpec {
    pub fn always_treat() -> Self {
        Self {
            label: "always-treat".into(),
            rule: PolicyRule::Static(1),
        }
    }

    pub fn never_treat() -> Self {
        Self {
            label: "never-treat".into(),
            rule: PolicyRule::Static(0),
        }
    }

    /// Returns the observed treatment.
    pub fn replay() -> Self {
        Self {
            label: "replay".into(),
            rule: PolicyRule::Replay,
        }
    }

    /// `1{sigma(s_t) > 0.5}` with the noise-free score of the complex
    /// generator, `s_t = tan(prod_j mean(L_j) + mean(A))` over a window of
    /// `window` steps.
    pub fn dgp_threshold(window: usize) -> Self {
        Self {
            label: "dgp-threshold".into(),
            rule: PolicyRule::Threshold {
                window: window.max(1),
            },
        }
    }

    pub fn custom(
        label: impl Into<String>,
        rule: impl Fn(&History<'_>) -> u8 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            rule: PolicyRule::Custom(Arc::new(rule)),
        }
    }

    /// Parses a CLI policy name. `window` is used by `dgp-threshold`.
    pub fn from_name(name: &str, window: usize) -> Result<Self> {
        match name {
            "always-treat" => Ok(Self::always_treat()),
            "never-treat" => Ok(Self::never_treat()),
            "replay" => Ok(Self::replay()),
            "dgp-threshold" => Ok(Self::dgp_threshold(window)),
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_replay(&self) -> bool {
        matches!(self.rule, PolicyRule::Replay)
    }

    /// Action at time `h.t`. `observed` is the recorded treatment, used only
    /// by the replay rule.
    pub fn action(&self, h: &History<'_>, observed: u8) -> u8 {
        match &self.rule {
            PolicyRule::Static(a) => *a,
            PolicyRule::Replay => observed,
            PolicyRule::Threshold { window } => {
                let (lbar_prod, abar) = crate::dgp::window_summaries(h.l, h.a, *window);
                u8::from((lbar_prod + abar).tan() > 0.0)
            }
            PolicyRule::Custom(f) => f(h),
        }
    }
}

/// Counterfactual actions `a^g_{1:tau}`: each `a^g_s` is the rule applied to
/// the observed covariates with earlier counterfactual actions substituted.
pub fn apply_policy(traj: &Trajectory, g: &PolicySpec) -> Result<Vec<u8>> {
    let tau = traj.tau();
    let mut ag = Vec::with_capacity(tau);
    for t in 1..=tau {
        let h = History {
            t,
            w: &traj.w,
            l: &traj.l[..t],
            a: &ag[..t - 1],
            y: &traj.y[..t - 1],
        };
        let action = g.action(&h, traj.a[t - 1]);
        if action as usize >= BINARY_ACTIONS {
            return Err(Error::Data(format!(
                "policy '{}' returned action {action} at t={t}; treatments are binary",
                g.label()
            )));
        }
        ag.push(action);
    }
    Ok(ag)
}

/// Affine map of outcomes onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScaler {
    pub lo: f64,
    pub hi: f64,
}

impl OutcomeScaler {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::Config(format!(
                "outcome scaler needs lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn identity() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    /// Min/max of the observed outcomes padded by 1% of the range on each side.
    pub fn fit(batch: &Batch) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for traj in &batch.trajectories {
            for &y in &traj.y {
                lo = lo.min(y);
                hi = hi.max(y);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Data("no finite outcomes to fit a scaler".into()));
        }
        let pad = if hi > lo { 0.01 * (hi - lo) } else { 0.01 };
        Self::new(lo - pad, hi + pad)
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.lo) / (self.hi - self.lo)
    }

    pub fn unscale(&self, y: f64) -> f64 {
        self.lo + y * (self.hi - self.lo)
    }

    /// Maps a scaled estimate and its standard error back to outcome units.
    pub fn unscale_estimate(&self, psi: f64, sigma: f64) -> (f64, f64) {
        (self.unscale(psi), sigma * (self.hi - self.lo))
    }

    pub fn rescale(&self, batch: &Batch) -> Result<Batch> {
        if batch.mode() != OutcomeMode::Continuous {
            return Err(Error::Data(
                "rescaling applies to continuous outcomes only".into(),
            ));
        }
        let mut out = batch.clone();
        for traj in &mut out.trajectories {
            for y in &mut traj.y {
                if *y < self.lo || *y > self.hi {
                    return Err(Error::Data(format!(
                        "outcome {y} outside scaler range [{}, {}]",
                        self.lo, self.hi
                    )));
                }
                *y = self.scale(*y);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Dimension,
    Range,
    Monotonicity,
    StopMismatch,
    PostEventDegeneracy,
    PostCensoringDegeneracy,
    Empty,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::Dimension => "dimension",
            ViolationKind::Range => "range",
            ViolationKind::Monotonicity => "monotonicity",
            ViolationKind::StopMismatch => "stop consistency",
            ViolationKind::PostEventDegeneracy => "post-event degeneracy",
            ViolationKind::PostCensoringDegeneracy => "post-censoring degeneracy",
            ViolationKind::Empty => "empty batch",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub subject: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "subject {}: {} ({})",
            self.subject, self.kind, self.detail
        )
    }
}

/// Checks every trajectory invariant. Returns the list of violations; an
/// empty list means the batch is valid.
pub fn validate(batch: &Batch) -> Vec<Violation> {
    let h = &batch.header;
    let mut out = Vec::new();
    if batch.trajectories.is_empty() {
        out.push(Violation {
            subject: 0,
            kind: ViolationKind::Empty,
            detail: "n must be at least 1".into(),
        });
    }
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let mut push = |kind, detail: String| {
            out.push(Violation {
                subject: i,
                kind,
                detail,
            })
        };
        let tau = h.tau;
        let dims_ok = traj.w.len() == h.d_w
            && traj.l.len() == tau
            && traj.l.iter().all(|l| l.len() == h.d_l)
            && traj.a.len() == tau
            && traj.y.len() == tau
            && traj
                .c
                .as_ref()
                .map_or(!h.censoring, |c| h.censoring && c.len() == tau);
        if !dims_ok {
            push(
                ViolationKind::Dimension,
                "lengths do not match the header".into(),
            );
            continue;
        }
        let finite = traj
            .w
            .iter()
            .chain(traj.l.iter().flatten())
            .all(|x| x.is_finite());
        if !finite {
            push(ViolationKind::Range, "non-finite covariate".into());
        }
        if traj.a.iter().any(|&a| a as usize >= batch.action_levels) {
            push(ViolationKind::Range, "treatment outside {0, 1}".into());
        }
        if let Some(c) = &traj.c {
            if c.iter().any(|&v| v > 1) {
                push(
                    ViolationKind::Range,
                    "censoring indicator outside {0, 1}".into(),
                );
            }
        }
        match h.mode {
            OutcomeMode::Survival => {
                if traj.y.iter().any(|&y| y != 0.0 && y != 1.0) {
                    push(ViolationKind::Range, "survival outcome not binary".into());
                }
                if traj.y.windows(2).any(|w| w[1] < w[0]) {
                    push(ViolationKind::Monotonicity, "outcome decreases".into());
                }
            }
            OutcomeMode::Continuous => {
                if traj.y.iter().any(|y| !y.is_finite()) {
                    push(ViolationKind::Range, "non-finite outcome".into());
                }
            }
        }
        let expected = stopping_time(traj, h.mode);
        if traj.stop != expected {
            push(
                ViolationKind::StopMismatch,
                format!("stop {} but first jump at {expected}", traj.stop),
            );
        }
        let stop = expected;
        let kind = if traj.c.as_ref().is_some_and(|c| c[stop - 1] == 1) {
            ViolationKind::PostCensoringDegeneracy
        } else {
            ViolationKind::PostEventDegeneracy
        };
        for s in stop..tau {
            let frozen = traj.l[s] == traj.l[stop - 1]
                && traj.a[s] == traj.a[stop - 1]
                && traj.y[s] == traj.y[stop - 1]
                && traj.c.as_ref().is_none_or(|c| c[s] == c[stop - 1]);
            if !frozen && stop < tau {
                push(
                    kind,
                    format!("node values change at t={} after T={stop}", s + 1),
                );
                break;
            }
        }
    }
    out
}

/// Path of the sidecar header for a JSON Lines dataset:
/// `data.jsonl -> data.header.json`.
pub fn header_path(data: &Path) -> PathBuf {
    data.with_extension("header.json")
}

/// 17 significant digits, always in exponent form.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|&x| fmt_f64(x)).collect();
    format!("[{}]", parts.join(","))
}

fn fmt_ints(v: &[u8]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

/// One JSON object per trajectory.
pub fn trajectory_to_json(traj: &Trajectory) -> String {
    let l: Vec<String> = traj.l.iter().map(|v| fmt_vec(v)).collect();
    let mut s = format!(
        "{{\"w\":{},\"l\":[{}],\"a\":{},\"y\":{}",
        fmt_vec(&traj.w),
        l.join(","),
        fmt_ints(&traj.a),
        fmt_vec(&traj.y)
    );
    if let Some(c) = &traj.c {
        s.push_str(&format!(",\"c\":{}", fmt_ints(c)));
    }
    s.push('}');
    s
}

#[derive(Deserialize)]
struct TrajectoryRecord {
    w: Vec<f64>,
    l: Vec<Vec<f64>>,
    a: Vec<u8>,
    y: Vec<f64>,
    #[serde(default)]
    c: Option<Vec<u8>>,
}

/// Writes `path` (JSON Lines) and its sidecar header.
pub fn write_dataset(path: &Path, batch: &Batch) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for traj in &batch.trajectories {
        writeln!(out, "{}", trajectory_to_json(traj))?;
    }
    out.flush()?;
    let header = serde_json::to_string_pretty(&batch.header)?;
    std::fs::write(header_path(path), header)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Batch> {
    let header: DatasetHeader = serde_json::from_str(&std::fs::read_to_string(header_path(path))?)?;
    let reader = BufReader::new(File::open(path)?);
    let mut trajectories = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        trajectories.push(Trajectory::new(
            rec.w,
            rec.l,
            rec.a,
            rec.y,
            rec.c,
            header.mode,
        ));
    }
    let batch = Batch::new(header, trajectories);
    let violations = validate(&batch);
    if let Some(v) = violations.first() {
        return Err(Error::Data(format!(
            "{} violation(s) in {}; first: {v}",
            violations.len(),
            path.display()
        )));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(tau: usize, censoring: bool) -> DatasetHeader {
        DatasetHeader {
            tau,
            d_w: 1,
            d_l: 1,
            mode: OutcomeMode::Survival,
            censoring,
            seed: None,
        }
    }

    fn surv(y: Vec<f64>) -> Trajectory {
        let tau = y.len();
        let mut l = vec![vec![0.5]; tau];
        let stop = y.iter().position(|&v| v == 1.0).map_or(tau, |p| p + 1);
        for (t, row) in l.iter_mut().enumerate() {
            row[0] = t.min(stop - 1) as f64;
        }
        Trajectory::new(vec![0.1], l, vec![1; tau], y, None, OutcomeMode::Survival)
    }

    #[test]
    fn stopping_time_is_first_jump() {
        assert_eq!(surv(vec![0.0, 0.0, 1.0, 1.0]).stop, 3);
        assert_eq!(surv(vec![0.0; 10]).stop, 10);
        let t = Trajectory::new(
            vec![0.0],
            vec![vec![0.0]; 4],
            vec![0; 4],
            vec![0.0; 4],
            Some(vec![0, 1, 1, 1]),
            OutcomeMode::Survival,
        );
        assert_eq!(t.stop, 2);
    }

    #[test]
    fn policies() {
        let traj = Trajectory::new(
            vec![0.0],
            vec![vec![0.0]; 3],
            vec![0, 1, 0],
            vec![0.0; 3],
            None,
            OutcomeMode::Survival,
        );
        assert_eq!(
            apply_policy(&traj, &PolicySpec::always_treat()).unwrap(),
            vec![1, 1, 1]
        );
        assert_eq!(
            apply_policy(&traj, &PolicySpec::replay()).unwrap(),
            vec![0, 1, 0]
        );
        let bad = PolicySpec::custom("two", |_| 2);
        assert!(apply_policy(&traj, &bad).is_err());
    }

    #[test]
    fn scaler_maps_and_inverts() {
        let s = OutcomeScaler::new(0.0, 1.0).unwrap();
        assert_eq!(s.scale(0.3), 0.3);
        let s = OutcomeScaler::new(-1.0, 1.0).unwrap();
        assert_eq!(s.unscale_estimate(0.5, 0.0).0, 0.0);
        let s = OutcomeScaler::new(0.0, 10.0).unwrap();
        assert!((s.unscale_estimate(0.2, 0.1).1 - 1.0).abs() < 1e-15);
        assert!(OutcomeScaler::new(2.0, 2.0).is_err());
    }

    #[test]
    fn validate_flags_violations() {
        let good = Batch::new(header(3, false), vec![surv(vec![0.0, 0.0, 0.0])]);
        assert!(validate(&good).is_empty());

        let mut t = surv(vec![0.0, 1.0, 1.0]);
        t.y = vec![0.0, 1.0, 0.0];
        let v = validate(&Batch::new(header(3, false), vec![t]));
        assert!(v.iter().any(|x| x.kind == ViolationKind::Monotonicity));

        let t = Trajectory::new(
            vec![0.0],
            vec![vec![0.0], vec![0.0], vec![3.0]],
            vec![0, 0, 0],
            vec![0.0; 3],
            Some(vec![0, 1, 1]),
            OutcomeMode::Survival,
        );
        let v = validate(&Batch::new(header(3, true), vec![t]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::PostCensoringDegeneracy);
        assert_eq!(v[0].kind.to_string(), "post-censoring degeneracy");
    }

    #[test]
    fn float_format_has_17_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.5), "-2.5000000000000000e0");
        let parsed: f64 = fmt_f64(std::f64::consts::PI).parse().unwrap();
        assert_eq!(parsed, std::f64::consts::PI);
    }
}
