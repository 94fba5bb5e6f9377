//! Deep longitudinal targeted maximum likelihood estimation.
//!
//! A heterogeneous-token transformer is trained by temporal-difference
//! learning to estimate counterfactual outcome means under dynamic treatment
//! policies, then bias-corrected by targeting along the efficient influence
//! function.

pub mod autodiff;
pub mod data;
pub mod dgp;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod ltmle;
pub mod optim;
pub mod targeting;
pub mod tdht;
pub mod tensor;
pub mod training;

pub use data::{Batch, DatasetHeader, OutcomeMode, OutcomeScaler, PolicySpec, Trajectory};
pub use dgp::{DgpKind, DgpSpec, TruthEstimate};
pub use error::{Error, Result};
pub use harness::{BenchConfig, BenchReport, MethodSummary, ReplicationRow};
pub use ltmle::GlmSpec;
pub use targeting::{EstimateResult, Method, Truncation};
pub use tdht::{FitOutputs, ModelConfig, Tdht};
pub use tensor::Tensor;
pub use training::TrainReport;
