use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dltmle_core::data::{read_dataset, write_dataset};
use dltmle_core::dgp::{exact_truth, generate, monte_carlo_truth};
use dltmle_core::gradcheck::full_suite;
use dltmle_core::harness::{
    emit_report, fit_deep, markdown, model_scale, run_benchmark, runtime_report, target_fit,
    ReportFormat,
};
use dltmle_core::ltmle::{ltmle_glm, FeatureMap};
use dltmle_core::{
    BenchConfig, DgpKind, DgpSpec, GlmSpec, Method, ModelConfig, PolicySpec, Tdht, Truncation,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "dltmle", version, about = "Deep longitudinal TMLE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DgpArgs {
    /// simple-cont, simple-surv, complex or micro.
    #[arg(long)]
    dgp: String,
    /// Horizon; defaults to 2 for micro and 10 otherwise.
    #[arg(long)]
    tau: Option<usize>,
    /// Covariate dimension (complex).
    #[arg(long, default_value_t = 5)]
    p: usize,
    /// Dependency length (complex).
    #[arg(long, default_value_t = 1)]
    h: usize,
    /// Seed of the structural parameters (complex).
    #[arg(long, default_value_t = 0)]
    param_seed: u64,
}

impl DgpArgs {
    fn spec(&self) -> Result<DgpSpec> {
        let kind = DgpKind::from_name(&self.dgp)?;
        let tau = self
            .tau
            .unwrap_or(if kind == DgpKind::Micro { 2 } else { 10 });
        let spec = DgpSpec {
            p: self.p,
            h: self.h,
            param_seed: self.param_seed,
            ..DgpSpec::new(kind, tau)
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Targeting {
    None,
    Td,
    Seq,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    /// The transformer fit from `--ckpt`, targeted per `--targeting`.
    Tdht,
    /// Sequential-regression LTMLE with logistic GLMs.
    LtmleGlm,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it as JSON lines plus a header.
    Simulate {
        #[command(flatten)]
        dgp: DgpArgs,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the true counterfactual mean as JSON.
    Oracle {
        #[command(flatten)]
        dgp: DgpArgs,
        /// always-treat, never-treat or dgp-threshold.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long, default_value_t = 1_000_000)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and save a checkpoint.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "always-treat")]
        policy: String,
        /// Window of the threshold policy.
        #[arg(long, default_value_t = 1)]
        window: usize,
        /// Model configuration as JSON.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named preset, e.g. simple-tau10.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch losses as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Estimate the counterfactual mean and print the result as JSON.
    Estimate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "always-treat")]
        policy: String,
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long, value_enum, default_value = "td")]
        targeting: Targeting,
        #[arg(long, value_enum, default_value = "tdht")]
        method: Estimator,
        /// Require censoring indicators in the data.
        #[arg(long)]
        censoring: bool,
        /// Cap clever covariates at this quantile of the positive weights.
        #[arg(long)]
        truncate_weights: Option<f64>,
        /// Use one indicator per history cell in the GLMs (binary data only).
        #[arg(long)]
        saturated: bool,
    },
    /// Run a replication benchmark.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "md,json,csv")]
        format: String,
    },
    /// Check gradients, the causal mask and the targeting derivative identity.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn model_config(config: Option<PathBuf>, preset: Option<String>) -> Result<ModelConfig> {
    match (config, preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            let cfg: ModelConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            cfg.validate()?;
            Ok(cfg)
        }
        (None, Some(name)) => Ok(ModelConfig::preset(&name)?),
        (None, None) => bail!("one of --config or --preset is required"),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { dgp, n, seed, out } => {
            let batch = generate(&dgp.spec()?, n, seed)?;
            write_dataset(&out, &batch)?;
            log::info!("wrote {n} subjects to {}", out.display());
        }
        Command::Oracle {
            dgp,
            policy,
            m,
            seed,
        } => {
            let spec = dgp.spec()?;
            let g = match policy {
                Some(name) => PolicySpec::from_name(&name, spec.h)?,
                None => spec.default_policy(),
            };
            let truth = if spec.kind == DgpKind::Micro {
                exact_truth(&g)
            } else {
                monte_carlo_truth(&spec, &g, m, seed)?
            };
            println!(
                "{}",
                serde_json::json!({"psi0": truth.psi0, "mc_se": truth.mc_se})
            );
        }
        Command::Fit {
            data,
            policy,
            window,
            config,
            preset,
            out,
            log,
        } => {
            let batch = read_dataset(&data)?;
            let g = PolicySpec::from_name(&policy, window)?;
            let cfg = model_config(config, preset)?;
            let deep = fit_deep(&batch, &g, &cfg)?;
            deep.model.save(&out)?;
            if let Some(path) = log {
                std::fs::write(&path, deep.report.to_csv())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            log::info!(
                "trained {} parameters in {:.1}s; kept epoch {}",
                deep.model.n_params(),
                deep.report.seconds,
                deep.report.selected_epoch
            );
        }
        Command::Estimate {
            ckpt,
            data,
            policy,
            window,
            targeting,
            method,
            censoring,
            truncate_weights,
            saturated,
        } => {
            let batch = read_dataset(&data)?;
            if censoring && !batch.header.censoring {
                bail!(
                    "--censoring given but {} has no censoring indicators",
                    data.display()
                );
            }
            let g = PolicySpec::from_name(&policy, window)?;
            let truncation = truncate_weights.map_or(Truncation::None, Truncation::Quantile);
            let targeted = match method {
                Estimator::LtmleGlm => {
                    let spec = GlmSpec {
                        features: if saturated {
                            FeatureMap::Saturated
                        } else {
                            FeatureMap::CurrentLag
                        },
                        truncation,
                        ..GlmSpec::default()
                    };
                    ltmle_glm(&batch, &g, &spec)?
                }
                Estimator::Tdht => {
                    let Some(ckpt) = ckpt else {
                        bail!("--ckpt is required unless --method ltmle-glm");
                    };
                    let model = Tdht::load_checkpoint(&ckpt)?;
                    let scaled = model_scale(&batch, model.scaler.as_ref())?;
                    let outputs = model.fit_outputs(&scaled, &g)?;
                    let m = match targeting {
                        Targeting::None => Method::Plugin,
                        Targeting::Td => Method::Td,
                        Targeting::Seq => Method::Seq,
                    };
                    target_fit(&scaled, &outputs, model.scaler.as_ref(), m, truncation)?
                }
            };
            log::info!("max clever covariate {:.3}", targeted.max_weight);
            println!("{}", serde_json::to_string(&targeted.result)?);
        }
        Command::Bench {
            config,
            out,
            workers,
            format,
        } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut cfg: BenchConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", config.display()))?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let formats = format
                .split(',')
                .map(ReportFormat::from_name)
                .collect::<Result<Vec<_>, _>>()?;
            let report = run_benchmark(&cfg)?;
            print!("{}", markdown(&report));
            for (method, secs) in runtime_report(&report) {
                log::info!("{method}: {secs:.2}s per replication");
            }
            if let Some(dir) = &cfg.out_dir {
                for path in emit_report(&report, &formats, dir)? {
                    log::info!("wrote {}", path.display());
                }
            }
            if report.failed() {
                eprintln!(
                    "{} of {} rows failed",
                    report.failures.len(),
                    report.failures.len() + report.rows.len()
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Gradcheck { seed } => {
            let mut ok = true;
            for c in full_suite(seed)? {
                let status = if c.passed() { "PASS" } else { "FAIL" };
                ok &= c.passed();
                println!(
                    "{status} {:<34} {:.3e} (tol {:.0e})",
                    c.name, c.value, c.tolerance
                );
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
