//! Replication driver: simulate, fit once, target with each method, and
//! summarize against the true value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, OutcomeMode, OutcomeScaler, PolicySpec};
use crate::dgp::{exact_truth, generate, monte_carlo_truth, DgpKind, DgpSpec, TruthEstimate};
use crate::error::{Error, Result};
use crate::ltmle::{ltmle_glm, GlmSpec};
use crate::targeting::{estimate, unscale_result, Epsilon, Method, Targeted, Truncation};
use crate::tdht::{FitOutputs, ModelConfig, Tdht};
use crate::training::{train, TrainReport};

pub const DEFAULT_TRUTH_SAMPLES: usize = 1_000_000;
pub const DEFAULT_TRUTH_SEED: u64 = 20_240_601;
/// Failure fraction above which a benchmark counts as failed.
pub const MAX_FAILURE_RATE: f64 = 0.2;

fn default_workers() -> usize {
    1
}

fn default_truth_samples() -> usize {
    DEFAULT_TRUTH_SAMPLES
}

fn default_truth_seed() -> u64 {
    DEFAULT_TRUTH_SEED
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dgp: DgpSpec,
    pub n: usize,
    /// Policy name; defaults to the generator's natural policy.
    #[serde(default)]
    pub policy: Option<String>,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub base_seed: u64,
    /// Named model preset; defaults to the one matching the generator.
    #[serde(default)]
    pub preset: Option<String>,
    /// Full model configuration, overriding `preset`.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_truth_samples")]
    pub truth_samples: usize,
    #[serde(default = "default_truth_seed")]
    pub truth_seed: u64,
    #[serde(default)]
    pub glm: GlmSpec,
    #[serde(default = "no_truncation")]
    pub truncation: Truncation,
}

fn no_truncation() -> Truncation {
    Truncation::None
}

impl BenchConfig {
    pub fn new(dgp: DgpSpec, n: usize, methods: Vec<Method>, reps: usize, base_seed: u64) -> Self {
        Self {
            dgp,
            n,
            policy: None,
            methods,
            reps,
            base_seed,
            preset: None,
            model: None,
            epochs: None,
            out_dir: None,
            workers: 1,
            truth_samples: DEFAULT_TRUTH_SAMPLES,
            truth_seed: DEFAULT_TRUTH_SEED,
            glm: GlmSpec::default(),
            truncation: Truncation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.policy_spec()?;
        self.model_config(0)?;
        Ok(())
    }

    pub fn policy_spec(&self) -> Result<PolicySpec> {
        match &self.policy {
            Some(name) => PolicySpec::from_name(name, self.dgp.h),
            None => Ok(self.dgp.default_policy()),
        }
    }

    /// Model configuration for one replication, seeded by the replication seed.
    pub fn model_config(&self, seed: u64) -> Result<ModelConfig> {
        let mut cfg = match (&self.model, &self.preset) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => ModelConfig::preset(p)?,
            (None, None) => ModelConfig::preset_for(self.dgp.kind, self.dgp.tau)?,
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn needs_deep(&self) -> bool {
        self.methods.iter().any(|&m| m != Method::LtmleGlm)
    }
}

/// Ground truth for a benchmark: exact for the micro generator, Monte Carlo otherwise.
pub fn truth_for(cfg: &BenchConfig) -> Result<TruthEstimate> {
    let g = cfg.policy_spec()?;
    match cfg.dgp.kind {
        DgpKind::Micro => Ok(exact_truth(&g)),
        _ => monte_carlo_truth(&cfg.dgp, &g, cfg.truth_samples, cfg.truth_seed),
    }
}

/// A trained model with its outputs on the (model-scale) data it was fit on.
pub struct DeepFit {
    pub model: Tdht,
    pub report: TrainReport,
    /// The data on the model's outcome scale.
    pub batch: Batch,
    pub outputs: FitOutputs,
    pub seconds: f64,
}

/// Data on the model's outcome scale: continuous outcomes are mapped onto `[0, 1]`.
pub fn model_scale(batch: &Batch, scaler: Option<&OutcomeScaler>) -> Result<Batch> {
    match (batch.mode(), scaler) {
        (OutcomeMode::Continuous, Some(s)) => s.rescale(batch),
        (OutcomeMode::Continuous, None) => Err(Error::Config(
            "continuous outcomes need an outcome scaler".into(),
        )),
        (OutcomeMode::Survival, _) => Ok(batch.clone()),
    }
}

/// Trains a model on `batch` (rescaling continuous outcomes) and evaluates it.
pub fn fit_deep(batch: &Batch, g: &PolicySpec, cfg: &ModelConfig) -> Result<DeepFit> {
    let start = Instant::now();
    let scaler = match batch.mode() {
        OutcomeMode::Continuous => Some(OutcomeScaler::fit(batch)?),
        OutcomeMode::Survival => None,
    };
    let scaled = model_scale(batch, scaler.as_ref())?;
    let (mut model, report) = train(&scaled, g, cfg)?;
    model.scaler = scaler;
    let outputs = model.fit_outputs(&scaled, g)?;
    Ok(DeepFit {
        model,
        report,
        batch: scaled,
        outputs,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Targets a model-scale fit and maps the result back to outcome units.
pub fn target_fit(
    batch: &Batch,
    outputs: &FitOutputs,
    scaler: Option<&OutcomeScaler>,
    method: Method,
    truncation: Truncation,
) -> Result<Targeted> {
    let mut out = estimate(batch, outputs, method, truncation)?;
    if let Some(s) = scaler {
        out.result = unscale_result(&out.result, s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub rep: usize,
    pub method: Method,
    pub psi_hat: f64,
    pub sigma_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub pn_dstar: f64,
    pub epsilon: Epsilon,
    pub runtime_sec: f64,
    pub certificate: bool,
    pub iterations: usize,
    /// Relative error of the partial-loss derivative identity (td only).
    pub fd_error: Option<f64>,
    /// Largest per-step first-order score in absolute value.
    pub max_step_score: f64,
    pub max_weight: f64,
}

impl ReplicationRow {
    fn new(rep: usize, t: &Targeted, runtime_sec: f64) -> Self {
        let r = &t.result;
        Self {
            rep,
            method: t.method,
            psi_hat: r.psi_hat,
            sigma_hat: r.sigma_hat,
            ci_lo: r.ci[0],
            ci_hi: r.ci[1],
            pn_dstar: r.pn_dstar,
            epsilon: r.epsilon.clone(),
            runtime_sec,
            certificate: r.certificate,
            iterations: r.iterations,
            fd_error: t.fd_error,
            max_step_score: t.step_scores.iter().fold(0.0, |m, s| m.max(s.abs())),
            max_weight: t.max_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRow {
    pub rep: usize,
    pub method: Method,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_sigma: f64,
    pub mean_runtime_sec: f64,
    pub certificate_rate: f64,
}

/// Bias, RMSE and coverage of `(psi_hat, ci_lo, ci_hi)` triples against `psi0`.
pub fn metrics(estimates: &[(f64, f64, f64)], psi0: f64) -> (f64, f64, f64) {
    let m = estimates.len() as f64;
    let bias = estimates.iter().map(|e| e.0).sum::<f64>() / m - psi0;
    let rmse = (estimates.iter().map(|e| (e.0 - psi0).powi(2)).sum::<f64>() / m).sqrt();
    let coverage = estimates
        .iter()
        .filter(|e| e.1 <= psi0 && psi0 <= e.2)
        .count() as f64
        / m;
    (bias, rmse, coverage)
}

fn summarize_method(method: Method, rows: &[&ReplicationRow], psi0: f64) -> MethodSummary {
    let m = rows.len() as f64;
    let triples: Vec<_> = rows.iter().map(|r| (r.psi_hat, r.ci_lo, r.ci_hi)).collect();
    let (bias, rmse, coverage) = metrics(&triples, psi0);
    MethodSummary {
        method,
        n_ok: rows.len(),
        bias,
        rmse,
        coverage,
        mean_sigma: rows.iter().map(|r| r.sigma_hat).sum::<f64>() / m,
        mean_runtime_sec: rows.iter().map(|r| r.runtime_sec).sum::<f64>() / m,
        certificate_rate: rows.iter().filter(|r| r.certificate).count() as f64 / m,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub policy: String,
    pub psi0: f64,
    pub mc_se: f64,
    pub truth_samples: usize,
    /// Methods with at least one successful replication, in request order.
    pub summaries: Vec<MethodSummary>,
    pub rows: Vec<ReplicationRow>,
    pub failures: Vec<FailedRow>,
    pub failure_rate: f64,
    /// Selected epoch per replication (empty without a deep method).
    pub selected_epochs: Vec<usize>,
}

impl BenchReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &ReplicationRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    pub fn failed(&self) -> bool {
        self.failure_rate > MAX_FAILURE_RATE
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.runtime_sec = 0.0;
        }
        for s in &mut r.summaries {
            s.mean_runtime_sec = 0.0;
        }
        r
    }
}

struct RepOutcome {
    rows: Vec<ReplicationRow>,
    failures: Vec<FailedRow>,
    selected_epoch: Option<usize>,
}

fn run_replication(cfg: &BenchConfig, g: &PolicySpec, rep: usize) -> RepOutcome {
    let seed = cfg.base_seed + rep as u64;
    let mut out = RepOutcome {
        rows: Vec::new(),
        failures: Vec::new(),
        selected_epoch: None,
    };
    let fail_all = |out: &mut RepOutcome, methods: &mut dyn Iterator<Item = Method>, e: &Error| {
        for method in methods {
            out.failures.push(FailedRow {
                rep,
                method,
                error: e.to_string(),
            });
        }
    };
    let batch = match generate(&cfg.dgp, cfg.n, seed) {
        Ok(b) => b,
        Err(e) => {
            fail_all(&mut out, &mut cfg.methods.iter().copied(), &e);
            return out;
        }
    };
    let deep = if cfg.needs_deep() {
        match cfg
            .model_config(seed)
            .and_then(|mc| fit_deep(&batch, g, &mc))
        {
            Ok(d) => {
                out.selected_epoch = Some(d.report.selected_epoch);
                Some(d)
            }
            Err(e) => {
                log::warn!("replication {rep}: model fit failed: {e}");
                fail_all(
                    &mut out,
                    &mut cfg
                        .methods
                        .iter()
                        .copied()
                        .filter(|&m| m != Method::LtmleGlm),
                    &e,
                );
                None
            }
        }
    } else {
        None
    };
    for &method in &cfg.methods {
        let start = Instant::now();
        let result = match (method, &deep) {
            (Method::LtmleGlm, _) => ltmle_glm(&batch, g, &cfg.glm).map(|t| (t, 0.0)),
            (_, Some(d)) => target_fit(
                &d.batch,
                &d.outputs,
                d.model.scaler.as_ref(),
                method,
                cfg.truncation,
            )
            .map(|t| (t, d.seconds)),
            (_, None) => continue,
        };
        match result {
            Ok((t, fit_seconds)) => {
                let secs = fit_seconds + start.elapsed().as_secs_f64();
                out.rows.push(ReplicationRow::new(rep, &t, secs));
            }
            Err(e) => {
                log::warn!("replication {rep}, {}: {e}", method.name());
                out.failures.push(FailedRow {
                    rep,
                    method,
                    error: e.to_string(),
                });
            }
        }
    }
    out
}

/// Runs every replication, then aggregates per method.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let g = cfg.policy_spec()?;
    let truth = truth_for(cfg)?;
    log::info!(
        "truth psi0 = {:.6} (mc_se {:.2e}, m = {})",
        truth.psi0,
        truth.mc_se,
        truth.m
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<RepOutcome> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| {
                let o = run_replication(cfg, &g, rep);
                log::info!(
                    "replication {}/{} done ({} ok, {} failed)",
                    rep + 1,
                    cfg.reps,
                    o.rows.len(),
                    o.failures.len()
                );
                o
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut selected_epochs = Vec::new();
    for o in outcomes {
        rows.extend(o.rows);
        failures.extend(o.failures);
        selected_epochs.extend(o.selected_epoch);
    }
    let summaries = cfg
        .methods
        .iter()
        .filter_map(|&m| {
            let rs: Vec<&ReplicationRow> = rows.iter().filter(|r| r.method == m).collect();
            (!rs.is_empty()).then(|| summarize_method(m, &rs, truth.psi0))
        })
        .collect();
    let total = rows.len() + failures.len();
    Ok(BenchReport {
        config: cfg.clone(),
        policy: g.label().to_string(),
        psi0: truth.psi0,
        mc_se: truth.mc_se,
        truth_samples: truth.m,
        summaries,
        rows,
        failure_rate: failures.len() as f64 / total.max(1) as f64,
        failures,
        selected_epochs,
    })
}

/// Mean wall-clock seconds per replication for each method that ran.
pub fn runtime_report(report: &BenchReport) -> BTreeMap<String, f64> {
    report
        .summaries
        .iter()
        .map(|s| (s.method.name().to_string(), s.mean_runtime_sec))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Md,
}

impl ReportFormat {
    pub fn from_name(s: &str) -> Result<Self> {
        match s.trim() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" => Ok(Self::Md),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

fn epsilon_field(e: &Epsilon) -> String {
    match e {
        Epsilon::Common(x) => format!("{x}"),
        Epsilon::PerTime(v) => v
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(";"),
    }
}

pub fn raw_csv(report: &BenchReport) -> String {
    let mut s = String::from(
        "rep,method,psi_hat,sigma_hat,ci_lo,ci_hi,pn_dstar,epsilon,runtime_sec,certificate\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.rep,
            r.method.name(),
            r.psi_hat,
            r.sigma_hat,
            r.ci_lo,
            r.ci_hi,
            r.pn_dstar,
            epsilon_field(&r.epsilon),
            r.runtime_sec,
            r.certificate
        );
    }
    s
}

pub fn metrics_csv(report: &BenchReport) -> String {
    let mut s = String::from(
        "method,n_ok,bias,rmse,coverage,mean_sigma,mean_runtime_sec,certificate_rate\n",
    );
    for m in &report.summaries {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.method.name(),
            m.n_ok,
            m.bias,
            m.rmse,
            m.coverage,
            m.mean_sigma,
            m.mean_runtime_sec,
            m.certificate_rate
        );
    }
    s
}

fn method_label(m: Method) -> &'static str {
    match m {
        Method::Plugin => "Deep LTMLE (plug-in)",
        Method::Td => "Deep LTMLE (td targeting)",
        Method::Seq => "Deep LTMLE (sequential targeting)",
        Method::LtmleGlm => "LTMLE (GLM)",
    }
}

pub fn markdown(report: &BenchReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "## {:?} DGP, tau = {}, n = {}, {} replications\n",
        c.dgp.kind, c.dgp.tau, c.n, c.reps
    );
    let _ = writeln!(
        s,
        "Policy `{}`; psi0 = {:.6} (Monte Carlo se {:.2e}, m = {}).\n",
        report.policy, report.psi0, report.mc_se, report.truth_samples
    );
    s.push_str("| Method | Bias | RMSE | Coverage | Mean sigma | Runtime (s) | Certificate |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for m in &report.summaries {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.2} | {:.4} | {:.1} | {:.2} |",
            method_label(m.method),
            m.bias,
            m.rmse,
            m.coverage,
            m.mean_sigma,
            m.mean_runtime_sec,
            m.certificate_rate
        );
    }
    if !report.failures.is_empty() {
        let _ = writeln!(
            s,
            "\n{} failed rows ({:.0}%).",
            report.failures.len(),
            100.0 * report.failure_rate
        );
    }
    s
}

/// Writes the report in each format under `dir`, returning the written paths.
pub fn emit_report(
    report: &BenchReport,
    formats: &[ReportFormat],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        let files: Vec<(&str, String)> = match f {
            ReportFormat::Json => vec![("report.json", serde_json::to_string_pretty(report)?)],
            ReportFormat::Csv => vec![
                ("metrics.csv", metrics_csv(report)),
                ("replications.csv", raw_csv(report)),
            ],
            ReportFormat::Md => vec![("report.md", markdown(report))],
        };
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            written.push(path);
        }
    }
    Ok(written)
}
