//! Decentralized learning by local-training ADMM with differentially private
//! gradient perturbation.
//!
//! A network of agents, each holding a private data shard, jointly minimizes
//! the average of their local empirical risks. Per round every agent runs a
//! short block of local SGD steps biased by an ADMM correction term, then
//! exchanges one message per neighbor to refresh the dual state. Gradients
//! can be soft-clipped and Gaussian-perturbed, and a Renyi-DP accountant
//! tracks the privacy budget the noise buys.
//!
//! Module map:
//!
//! - [`graph`]: communication topologies, Laplacian spectra, the dual
//!   step-size stability bound.
//! - [`data`]: synthetic shard generation and CSV import.
//! - [`objective`]: the regularized logistic loss, its gradients, and
//!   empirical estimates of smoothness and noise constants.
//! - [`dp`]: soft clipping, Gaussian perturbation, the accountant, and noise
//!   calibration.
//! - [`admm`]: the training loop itself.
//! - [`metrics`]: per-round measurements, the communication cost model, and
//!   the stationarity summary.
//! - [`harness`]: config-file driven experiment runner with CSV output.
//!
//! Everything numeric is generic over [`Scalar`] (implemented for `f32` and
//! `f64`); the `*64` aliases below pick the default precision.

pub mod admm;
pub mod data;
pub mod dp;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod rng;
pub mod scalar;

pub use scalar::Scalar;

pub type SpectralInfo64 = graph::SpectralInfo<f64>;
pub type LocalShard64 = data::LocalShard<f64>;
pub type SyntheticData64 = data::SyntheticData<f64>;
pub type ObjectiveSpec64 = objective::ObjectiveSpec<f64>;
pub type EstimatedConstants64 = objective::EstimatedConstants<f64>;
pub type MechanismParams64 = dp::MechanismParams<f64>;
pub type PrivacyBudget64 = dp::PrivacyBudget<f64>;
pub type AgentState64 = admm::AgentState<f64>;
pub type RunConfig64 = admm::RunConfig<f64>;
pub type RoundMetrics64 = metrics::RoundMetrics<f64>;
pub type CostModel64 = metrics::CostModel<f64>;
