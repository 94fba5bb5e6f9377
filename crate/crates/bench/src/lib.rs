//! Shared fixtures for the benchmarks.

use dltmle_core::dgp::gen_simple_survival;
use dltmle_core::harness::fit_deep;
use dltmle_core::{Batch, FitOutputs, ModelConfig, PolicySpec, Tdht};

/// Simple survival data at the benchmark scale.
pub fn survival_batch(n: usize, tau: usize) -> Batch {
    gen_simple_survival(n, tau, 42).expect("simple survival generator")
}

/// A briefly trained model with its outputs on `batch`.
pub fn trained(batch: &Batch, epochs: usize) -> (Tdht, FitOutputs) {
    let mut cfg = ModelConfig::preset("simple-tau10").expect("preset");
    cfg.epochs = epochs;
    let deep = fit_deep(batch, &PolicySpec::always_treat(), &cfg).expect("fit");
    (deep.model, deep.outputs)
}
