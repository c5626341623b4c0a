//! Config-driven experiment orchestration: parse a TOML run description,
//! build the network and data, vet the step sizes, run, and write results.
//!
//! # Config schema
//!
//! ```toml
//! [graph]
//! topology = "ring"        # "ring" | "complete" | "edges"
//! n_agents = 10
//! # edges = [[0, 1], [1, 2], [2, 0]]   (required iff topology = "edges")
//!
//! [data]
//! m_per_agent = 1000       # required unless csv_dir is set
//! dim = 5                  # required unless csv_dir is set
//! separation = inf         # default 1.0; inf means noiseless labels
//! heterogeneity = 0.0      # default 0.0; per-agent feature mean shift
//! seed = 42                # default 42; dataset seed
//! # csv_dir = "shards"     # load agent_<i>.csv instead of generating
//!
//! [objective]              # optional section
//! reg_weight = 0.01        # default 0.0
//!
//! [run]
//! gamma = 0.1              # primal step size
//! beta = 0.1               # dual step size
//! rho = 0.1                # penalty parameter
//! tau = 4                  # local steps per round
//! rounds = 4000
//! master_seed = 1          # default 0; drives batches, noise, probes
//! workers = 1              # default 1; thread count, never affects results
//! clipping = true          # default true
//! noise = true             # default true
//! full_batch = false       # default false
//!
//! [privacy]
//! zeta = 1.0               # clip threshold
//! sigma_e = 0.5            # noise std per coordinate
//! batch_size = 8
//! delta = 1e-4
//! log_base = "e"           # default "e"; or a number, e.g. 10
//!
//! [cost]                   # optional section
//! t_g = 0.1                # default 0.1; per-gradient cost
//! t_c = 1.0                # default 1.0; per-communication cost
//!
//! [constants]              # optional section
//! probe_count = 100        # default 100
//! probe_radius = 1.0       # default 1.0
//! # sigma_g = 0.25         # skip estimation and use this value
//! ```
//!
//! Unknown keys anywhere are rejected, so typos fail loudly.
//!
//! # Outputs
//!
//! The metrics CSV has header `k,grad_norm,consensus_err,train_acc,test_acc,
//! model_time,epsilon,regime` and one row per completed round. Accuracy on
//! held-out data is `NaN` when the config loads CSV shards (no test split),
//! and `epsilon` is `inf` for runs that spend no privacy budget (noise off
//! or full-batch gradients). If a run fails mid-way the rows of the rounds
//! that did complete are still written.
//!
//! The summary is a fixed-order `key=value` listing: `rounds=` first, then
//! (for non-empty runs) the final row's headline numbers followed by the
//! constants feeding the stationarity functional. Reruns of the same config
//! produce byte-identical CSV and summary.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::admm::{
    self, AdmmError, Evaluator, RunConfig, RunFailure, StepsizeReport,
};
use crate::data::{self, DataError, GenerateParams, LocalShard};
use crate::dp::{DpError, LogBase, MechanismParams};
use crate::graph::{spectral_info, GraphError, SpectralInfo, Topology};
use crate::metrics::{
    stationarity_measure, stationarity_weights_valid, CostModel, MetricsError, Regime,
    RoundMetrics,
};
use crate::objective::{self, EstimatedConstants, ObjectiveError, ObjectiveSpec};
use crate::rng::{derive_stream, Purpose};

pub const CSV_HEADER: &str =
    "k,grad_norm,consensus_err,train_acc,test_acc,model_time,epsilon,regime";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read config {path}: {source}")]
    ConfigIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("config error: {0}")]
    Invalid(String),
    #[error("graph setup failed: {0}")]
    Graph(#[from] GraphError),
    #[error("data setup failed: {0}")]
    Data(#[from] DataError),
    #[error("objective setup failed: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("privacy setup failed: {0}")]
    Dp(#[from] DpError),
    #[error("cost model setup failed: {0}")]
    Metrics(#[from] MetricsError),
    #[error("run setup failed: {0}")]
    Setup(#[from] AdmmError),
    #[error("step-size check failed (rerun with force to override)\n{report}")]
    StepsizeAbort { report: StepsizeReport<f64> },
    #[error("{0}")]
    Run(#[from] Box<RunFailure<f64>>),
    #[error("cannot write {path}: {source}")]
    OutputIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad metrics CSV {path}: {reason}")]
    CsvFormat { path: PathBuf, reason: String },
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for a step-size
    /// abort, 4 for divergence, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ConfigIo { .. }
            | HarnessError::Parse { .. }
            | HarnessError::Invalid(_)
            | HarnessError::Graph(_)
            | HarnessError::Data(_)
            | HarnessError::Objective(_)
            | HarnessError::Dp(_)
            | HarnessError::Metrics(_)
            | HarnessError::Setup(_) => 2,
            HarnessError::StepsizeAbort { .. } => 3,
            HarnessError::Run(failure) => match failure.error {
                AdmmError::Divergence { .. } => 4,
                _ => 1,
            },
            HarnessError::OutputIo { .. } | HarnessError::CsvFormat { .. } => 1,
        }
    }
}

// ============================================================================
// Config file model
// ============================================================================

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphSection,
    pub data: DataSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    pub run: RunSection,
    pub privacy: PrivacySection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub constants: ConstantsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Ring,
    Complete,
    Edges,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub topology: TopologyKind,
    pub n_agents: usize,
    #[serde(default)]
    pub edges: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub m_per_agent: Option<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default = "default_data_seed")]
    pub seed: u64,
    #[serde(default)]
    pub csv_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default)]
    pub reg_weight: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection { reg_weight: 0.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub gamma: f64,
    pub beta: f64,
    pub rho: f64,
    pub tau: usize,
    pub rounds: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_true")]
    pub clipping: bool,
    #[serde(default = "default_true")]
    pub noise: bool,
    #[serde(default)]
    pub full_batch: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub zeta: f64,
    pub sigma_e: f64,
    pub batch_size: usize,
    pub delta: f64,
    #[serde(default)]
    pub log_base: Option<LogBaseField>,
}

/// `log_base` accepts either a string ("e") or a number (10).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LogBaseField {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default = "default_t_g")]
    pub t_g: f64,
    #[serde(default = "default_t_c")]
    pub t_c: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection { t_g: default_t_g(), t_c: default_t_c() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSection {
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    #[serde(default = "default_probe_radius")]
    pub probe_radius: f64,
    #[serde(default)]
    pub sigma_g: Option<f64>,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        ConstantsSection {
            probe_count: default_probe_count(),
            probe_radius: default_probe_radius(),
            sigma_g: None,
        }
    }
}

fn default_separation() -> f64 {
    1.0
}
fn default_data_seed() -> u64 {
    42
}
fn default_workers() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_t_g() -> f64 {
    0.1
}
fn default_t_c() -> f64 {
    1.0
}
fn default_probe_count() -> usize {
    100
}
fn default_probe_radius() -> f64 {
    1.0
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::ConfigIo {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| HarnessError::Parse {
        path: path.to_path_buf(),
        source: Box::new(source),
    })
}

// ============================================================================
// Experiment assembly
// ============================================================================

/// Command-line adjustments applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces `run.master_seed` (the dataset seed stays put).
    pub seed: Option<u64>,
    /// Metrics CSV destination; `None` skips writing.
    pub out: Option<PathBuf>,
    /// Run even if the dual step size fails its stability bound.
    pub force: bool,
    /// Replaces `run.workers`.
    pub workers: Option<usize>,
    /// Replaces the estimated (or configured) sampling-noise constant.
    pub sigma_g: Option<f64>,
    /// Replaces `privacy.log_base`.
    pub log_base: Option<LogBase>,
}

pub fn build_topology(section: &GraphSection) -> Result<Topology, HarnessError> {
    match section.topology {
        TopologyKind::Edges => {
            let edges = section.edges.as_ref().ok_or_else(|| {
                HarnessError::Invalid(
                    "topology = \"edges\" requires an edges list".into(),
                )
            })?;
            Ok(Topology::from_edge_list(section.n_agents, edges)?)
        }
        kind => {
            if section.edges.is_some() {
                return Err(HarnessError::Invalid(
                    "an edges list is only valid with topology = \"edges\"".into(),
                ));
            }
            match kind {
                TopologyKind::Ring => Ok(Topology::ring(section.n_agents)?),
                TopologyKind::Complete => Ok(Topology::complete(section.n_agents)?),
                TopologyKind::Edges => unreachable!(),
            }
        }
    }
}

/// Training shards plus held-out shards (present only for synthetic data).
type ShardSets = (Vec<LocalShard<f64>>, Option<Vec<LocalShard<f64>>>);

pub fn load_shards(section: &DataSection, n_agents: usize) -> Result<ShardSets, HarnessError> {
    if let Some(dir) = &section.csv_dir {
        let mut train = Vec::with_capacity(n_agents);
        for agent in 0..n_agents {
            let path = dir.join(format!("agent_{agent}.csv"));
            let shard: LocalShard<f64> = data::load_csv(&path)?;
            if let Some(first) = train.first() {
                let first: &LocalShard<f64> = first;
                if shard.dim() != first.dim() {
                    return Err(HarnessError::Invalid(format!(
                        "CSV shards disagree on dimension: agent 0 has {}, agent {agent} has {}",
                        first.dim(),
                        shard.dim()
                    )));
                }
            }
            train.push(shard);
        }
        return Ok((train, None));
    }
    let m_per_agent = section.m_per_agent.ok_or_else(|| {
        HarnessError::Invalid("data.m_per_agent is required without csv_dir".into())
    })?;
    let dim = section
        .dim
        .ok_or_else(|| HarnessError::Invalid("data.dim is required without csv_dir".into()))?;
    let generated = data::generate(&GenerateParams {
        n_agents,
        m_per_agent,
        dim,
        separation: section.separation,
        heterogeneity: section.heterogeneity,
        seed: section.seed,
    })?;
    Ok((generated.train, Some(generated.test)))
}

fn resolve_log_base(section: &PrivacySection) -> Result<LogBase, HarnessError> {
    match &section.log_base {
        None => Ok(LogBase::Natural),
        Some(LogBaseField::Number(b)) => {
            let base = LogBase::Base(*b);
            // Round-trip through the validating parser.
            Ok(b.to_string().parse::<LogBase>().map(|_| base)?)
        }
        Some(LogBaseField::Text(text)) => Ok(text.parse()?),
    }
}

/// Everything a run produces besides its exit status.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub metrics: Vec<RoundMetrics<f64>>,
    /// Fixed-order `key=value` report; see [`emit_summary`].
    pub summary: String,
    pub stepsize: StepsizeReport<f64>,
    pub spectrum: SpectralInfo<f64>,
    pub constants: EstimatedConstants<f64>,
    /// The sampling-noise constant actually used for the stationarity lines.
    pub sigma_g: f64,
    /// Where the metrics CSV went, if anywhere.
    pub csv_path: Option<PathBuf>,
}

/// A fully assembled experiment, validated but not yet run.
#[derive(Debug)]
pub struct PreparedExperiment {
    pub topology: Topology,
    pub train: Vec<LocalShard<f64>>,
    pub test: Option<Vec<LocalShard<f64>>>,
    pub spec: ObjectiveSpec<f64>,
    pub run_cfg: RunConfig<f64>,
    pub constants: EstimatedConstants<f64>,
    pub sigma_g: f64,
    pub spectrum: SpectralInfo<f64>,
    pub stepsize: StepsizeReport<f64>,
    pub cost_model: CostModel<f64>,
    pub log_base: LogBase,
    pub delta: f64,
    pub zeta: f64,
}

/// Builds everything an experiment needs and evaluates the step-size report
/// without running any rounds. `overrides.force` is not consulted here.
pub fn prepare(
    config: &ExperimentConfig,
    overrides: &Overrides,
) -> Result<PreparedExperiment, HarnessError> {
    let topology = build_topology(&config.graph)?;
    let (train, test) = load_shards(&config.data, topology.n_agents())?;
    let dim = train[0].dim();
    let spec = ObjectiveSpec::new(config.objective.reg_weight, dim)?;

    let min_shard = train.iter().map(LocalShard::len).min().expect("nonempty");
    let mechanism = MechanismParams::new(
        config.privacy.zeta,
        config.privacy.sigma_e,
        config.privacy.batch_size,
        min_shard,
    )?;
    let run_cfg = RunConfig {
        gamma: config.run.gamma,
        beta: config.run.beta,
        rho: config.run.rho,
        tau: config.run.tau,
        rounds: config.run.rounds,
        mechanism,
        clipping_enabled: config.run.clipping,
        noise_enabled: config.run.noise,
        full_batch: config.run.full_batch,
        master_seed: overrides.seed.unwrap_or(config.run.master_seed),
        workers: overrides.workers.unwrap_or(config.run.workers),
    };
    run_cfg.validate()?;

    // Constants drive the gamma heuristic and the stationarity summary.
    let mut probe_rng = derive_stream(run_cfg.master_seed, Purpose::Probe, 0, 0, 0);
    let noise_batch = if run_cfg.full_batch { usize::MAX } else { config.privacy.batch_size };
    let constants = objective::estimate_constants(
        &spec,
        &train,
        config.constants.probe_count,
        config.constants.probe_radius,
        noise_batch,
        &mut probe_rng,
    )?;
    let sigma_g = overrides
        .sigma_g
        .or(config.constants.sigma_g)
        .unwrap_or(constants.sampling_noise);

    let spectrum = spectral_info::<f64>(&topology)?;
    let stepsize = admm::stepsize_check(&run_cfg, &spectrum, constants.smoothness);
    let cost_model = CostModel::new(config.cost.t_g, config.cost.t_c)?;
    let log_base = match overrides.log_base {
        Some(base) => base,
        None => resolve_log_base(&config.privacy)?,
    };
    Ok(PreparedExperiment {
        topology,
        train,
        test,
        spec,
        run_cfg,
        constants,
        sigma_g,
        spectrum,
        stepsize,
        cost_model,
        log_base,
        delta: config.privacy.delta,
        zeta: config.privacy.zeta,
    })
}

/// Loads, validates, runs, and reports one experiment.
///
/// The step-size report is evaluated before the run: a failed dual bound
/// aborts (exit code 3) unless `overrides.force` is set. The gamma heuristic
/// never aborts; it only flips the WARN line in the report.
pub fn run_experiment(
    config_path: &Path,
    overrides: &Overrides,
) -> Result<ExperimentOutcome, HarnessError> {
    let config = load_config(config_path)?;
    run_loaded(&config, overrides)
}

/// [`run_experiment`] on an already-parsed config.
pub fn run_loaded(
    config: &ExperimentConfig,
    overrides: &Overrides,
) -> Result<ExperimentOutcome, HarnessError> {
    let prepared = prepare(config, overrides)?;
    if !prepared.stepsize.beta_ok && !overrides.force {
        return Err(HarnessError::StepsizeAbort { report: prepared.stepsize });
    }
    let evaluator = Evaluator::new(
        &prepared.spec,
        &prepared.train,
        prepared.test.as_deref(),
        &prepared.cost_model,
        &prepared.run_cfg,
        prepared.delta,
        prepared.log_base,
    )?;

    let run_result = admm::run(&prepared.run_cfg, &prepared.topology, &prepared.train, &evaluator);
    let (metrics, failure) = match run_result {
        Ok(metrics) => (metrics, None),
        Err(boxed) => {
            let RunFailure { error, completed } = *boxed;
            (completed, Some(error))
        }
    };

    let csv_path = match &overrides.out {
        Some(path) => {
            write_metrics_csv(path, &metrics)?;
            Some(path.clone())
        }
        None => None,
    };
    if let Some(error) = failure {
        return Err(Box::new(RunFailure { error, completed: metrics }).into());
    }

    let summary = emit_summary(&metrics, prepared.zeta, prepared.sigma_g, &prepared.constants);
    Ok(ExperimentOutcome {
        metrics,
        summary,
        stepsize: prepared.stepsize,
        spectrum: prepared.spectrum,
        constants: prepared.constants,
        sigma_g: prepared.sigma_g,
        csv_path,
    })
}

// ============================================================================
// Reports and CSV
// ============================================================================

/// Fixed-order machine-parsable report. An empty run yields `rounds=0` and
/// nothing else; otherwise the final row's headline values come first, then
/// the constants and the stationarity functional over the whole history.
pub fn emit_summary(
    metrics: &[RoundMetrics<f64>],
    zeta: f64,
    sigma_g: f64,
    constants: &EstimatedConstants<f64>,
) -> String {
    let mut out = format!("rounds={}\n", metrics.len());
    if let Some(last) = metrics.last() {
        out.push_str(&format!("final_grad_norm={}\n", last.grad_norm_at_mean));
        out.push_str(&format!("final_consensus_err={}\n", last.consensus_error));
        out.push_str(&format!("final_train_acc={}\n", last.train_accuracy));
        out.push_str(&format!("final_test_acc={}\n", last.test_accuracy));
        out.push_str(&format!("epsilon={}\n", last.running_epsilon));
        out.push_str(&format!("model_time={}\n", last.model_time));
        out.push_str(&format!("smoothness={}\n", constants.smoothness));
        out.push_str(&format!("heterogeneity={}\n", constants.heterogeneity));
        out.push_str(&format!("sigma_g={sigma_g}\n"));
        out.push_str(&format!(
            "stationarity_weights_valid={}\n",
            stationarity_weights_valid(zeta, sigma_g)
        ));
        out.push_str(&format!(
            "stationarity_measure={}\n",
            stationarity_measure(metrics, zeta, sigma_g)
        ));
    }
    out
}

/// Writes the metrics table. Floats print in shortest round-trip form, so
/// rereading reproduces the in-memory values exactly.
pub fn write_metrics_csv(path: &Path, metrics: &[RoundMetrics<f64>]) -> Result<(), HarnessError> {
    let io_err = |source| HarnessError::OutputIo { path: path.to_path_buf(), source };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    let result: std::io::Result<()> = (|| {
        writeln!(w, "{CSV_HEADER}")?;
        for row in metrics {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                row.round,
                row.grad_norm_at_mean,
                row.consensus_error,
                row.train_accuracy,
                row.test_accuracy,
                row.model_time,
                row.running_epsilon,
                row.regime
            )?;
        }
        w.flush()
    })();
    result.map_err(io_err)
}

/// Reads a file written by [`write_metrics_csv`] back into memory.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundMetrics<f64>>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::ConfigIo {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: String| HarnessError::CsvFormat { path: path.to_path_buf(), reason };
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == CSV_HEADER => {}
        other => {
            return Err(bad(format!(
                "expected header {CSV_HEADER:?}, found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut metrics = Vec::new();
    for (index, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(bad(format!("row {}: expected 8 fields, found {}", index + 1, fields.len())));
        }
        let field_err =
            |name: &str, value: &str| bad(format!("row {}: bad {name} value {value:?}", index + 1));
        let float = |name: &str, value: &str| -> Result<f64, HarnessError> {
            value.parse().map_err(|_| field_err(name, value))
        };
        metrics.push(RoundMetrics {
            round: fields[0].parse().map_err(|_| field_err("k", fields[0]))?,
            grad_norm_at_mean: float("grad_norm", fields[1])?,
            consensus_error: float("consensus_err", fields[2])?,
            train_accuracy: float("train_acc", fields[3])?,
            test_accuracy: float("test_acc", fields[4])?,
            model_time: float("model_time", fields[5])?,
            running_epsilon: float("epsilon", fields[6])?,
            regime: fields[7].parse::<Regime>().map_err(|_| field_err("regime", fields[7]))?,
        });
    }
    Ok(metrics)
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp;

    const SMOKE: &str = r#"
[graph]
topology = "ring"
n_agents = 4

[data]
m_per_agent = 40
dim = 3
separation = 2.0
seed = 9

[objective]
reg_weight = 0.01

[run]
gamma = 0.05
beta = 0.1
rho = 0.1
tau = 4
rounds = 6
master_seed = 3

[privacy]
zeta = 1.0
sigma_e = 0.5
batch_size = 8
delta = 1e-4
"#;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.cfg");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config: ExperimentConfig = toml::from_str(SMOKE).unwrap();
        assert_eq!(config.graph.topology, TopologyKind::Ring);
        assert_eq!(config.data.heterogeneity, 0.0);
        assert_eq!(config.run.workers, 1);
        assert!(config.run.clipping);
        assert!(config.run.noise);
        assert!(!config.run.full_batch);
        assert_eq!(config.cost.t_g, 0.1);
        assert_eq!(config.cost.t_c, 1.0);
        assert_eq!(config.constants.probe_count, 100);
        assert!(config.constants.sigma_g.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SMOKE.replace("gamma = 0.05", "gamma = 0.05\ngama_typo = 1");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), &bad);
        let err = run_experiment(&path, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn inf_separation_parses() {
        let text = SMOKE.replace("separation = 2.0", "separation = inf");
        let config: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(config.data.separation.is_infinite());
    }

    #[test]
    fn edges_topology_wiring() {
        let text = SMOKE.replace(
            "topology = \"ring\"\nn_agents = 4",
            "topology = \"edges\"\nn_agents = 3\nedges = [[0, 1], [1, 2]]",
        );
        let config: ExperimentConfig = toml::from_str(&text).unwrap();
        let topology = build_topology(&config.graph).unwrap();
        assert_eq!(topology.n_agents(), 3);
        assert_eq!(topology.neighbors(1), &[0, 2]);

        let missing = GraphSection { topology: TopologyKind::Edges, n_agents: 3, edges: None };
        assert!(matches!(build_topology(&missing), Err(HarnessError::Invalid(_))));
        let conflicted = GraphSection {
            topology: TopologyKind::Ring,
            n_agents: 3,
            edges: Some(vec![(0, 1)]),
        };
        assert!(matches!(build_topology(&conflicted), Err(HarnessError::Invalid(_))));
    }

    #[test]
    fn log_base_field_accepts_text_and_number() {
        let text = SMOKE.replace("delta = 1e-4", "delta = 1e-4\nlog_base = 10");
        let config: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(resolve_log_base(&config.privacy).unwrap(), LogBase::Base(10.0));
        let text = SMOKE.replace("delta = 1e-4", "delta = 1e-4\nlog_base = \"e\"");
        let config: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(resolve_log_base(&config.privacy).unwrap(), LogBase::Natural);
        let text = SMOKE.replace("delta = 1e-4", "delta = 1e-4\nlog_base = 0.5");
        let config: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(resolve_log_base(&config.privacy).is_err());
    }

    #[test]
    fn smoke_run_writes_csv_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), SMOKE);
        let out = dir.path().join("metrics.csv");
        let overrides = Overrides { out: Some(out.clone()), ..Overrides::default() };
        let outcome = run_experiment(&path, &overrides).unwrap();

        assert_eq!(outcome.metrics.len(), 6);
        assert!(outcome.stepsize.beta_ok);
        assert_eq!(outcome.csv_path.as_deref(), Some(out.as_path()));

        let reread = read_metrics_csv(&out).unwrap();
        assert_eq!(reread.len(), 6);
        for (a, b) in outcome.metrics.iter().zip(&reread) {
            assert_eq!(a.round, b.round);
            assert_eq!(a.grad_norm_at_mean.to_bits(), b.grad_norm_at_mean.to_bits());
            assert_eq!(a.consensus_error.to_bits(), b.consensus_error.to_bits());
            assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
            assert_eq!(a.running_epsilon.to_bits(), b.running_epsilon.to_bits());
            assert_eq!(a.regime, b.regime);
        }

        // The epsilon column is the accountant's closed form at k+1 rounds.
        let params = MechanismParams::new(1.0, 0.5, 8, 40).unwrap();
        for row in &outcome.metrics {
            let direct = dp::running_epsilon(&params, row.round + 1, 4, 1e-4).unwrap();
            let rel = ((row.running_epsilon - direct) / direct).abs();
            assert!(rel < 1e-12);
        }

        // Recomputing the stationarity functional from the reread CSV
        // reproduces the summary value.
        let from_disk = stationarity_measure(&reread, 1.0, outcome.sigma_g);
        let line = outcome
            .summary
            .lines()
            .find(|l| l.starts_with("stationarity_measure="))
            .unwrap();
        let in_memory: f64 = line.split('=').nth(1).unwrap().parse().unwrap();
        assert!(((from_disk - in_memory) / in_memory.abs().max(1e-30)).abs() < 1e-12);

        for key in [
            "rounds=6",
            "final_grad_norm=",
            "final_consensus_err=",
            "final_train_acc=",
            "final_test_acc=",
            "epsilon=",
            "model_time=",
            "smoothness=",
            "sigma_g=",
            "stationarity_weights_valid=",
            "stationarity_measure=",
        ] {
            assert!(
                outcome.summary.lines().any(|l| l.starts_with(key)),
                "missing {key} in summary:\n{}",
                outcome.summary
            );
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), SMOKE);
        let out_a = dir.path().join("a.csv");
        let out_b = dir.path().join("b.csv");
        let first = run_experiment(
            &path,
            &Overrides { out: Some(out_a.clone()), ..Overrides::default() },
        )
        .unwrap();
        let second = run_experiment(
            &path,
            &Overrides { out: Some(out_b.clone()), workers: Some(3), ..Overrides::default() },
        )
        .unwrap();
        assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());
        assert_eq!(first.summary, second.summary);
    }

    #[test]
    fn seed_override_changes_results_but_not_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), SMOKE);
        let base = run_experiment(&path, &Overrides::default()).unwrap();
        let reseeded =
            run_experiment(&path, &Overrides { seed: Some(999), ..Overrides::default() })
                .unwrap();
        assert_ne!(
            base.metrics.last().unwrap().grad_norm_at_mean.to_bits(),
            reseeded.metrics.last().unwrap().grad_norm_at_mean.to_bits()
        );
        // Same dataset, so the analytic smoothness constant is unchanged.
        assert_eq!(base.constants.smoothness, reseeded.constants.smoothness);
    }

    #[test]
    fn beta_violation_aborts_unless_forced() {
        let text = SMOKE
            .replace("beta = 0.1", "beta = 3.0")
            .replace("rounds = 6", "rounds = 2");
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), &text);
        let err = run_experiment(&path, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let text = err.to_string();
        assert!(text.contains("FAIL"), "report should show the failed bound: {text}");

        let forced = run_experiment(&path, &Overrides { force: true, ..Overrides::default() });
        match forced {
            Ok(outcome) => assert_eq!(outcome.metrics.len(), 2),
            Err(e) => assert_eq!(e.exit_code(), 4),
        }
    }

    #[test]
    fn divergence_reports_exit_code_and_partial_csv() {
        let text = SMOKE
            .replace("beta = 0.1", "beta = 80.0")
            .replace("gamma = 0.05", "gamma = 3.0")
            .replace("rounds = 6", "rounds = 5000")
            .replace("reg_weight = 0.01", "reg_weight = 0.0");
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), &text);
        let out = dir.path().join("partial.csv");
        let err = run_experiment(
            &path,
            &Overrides { force: true, out: Some(out.clone()), ..Overrides::default() },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 4, "expected divergence, got: {err}");
        let rows = read_metrics_csv(&out).unwrap();
        match err {
            HarnessError::Run(failure) => {
                assert_eq!(rows.len(), failure.completed.len());
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn sigma_g_override_feeds_summary() {
        let text = SMOKE.replace(
            "[privacy]",
            "[constants]\nprobe_count = 10\nsigma_g = 0.019\n\n[privacy]",
        );
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), &text);
        let outcome = run_experiment(&path, &Overrides::default()).unwrap();
        assert_eq!(outcome.sigma_g, 0.019);
        assert!(outcome.summary.contains("sigma_g=0.019\n"));
        let flagged = run_experiment(
            &path,
            &Overrides { sigma_g: Some(0.5), ..Overrides::default() },
        )
        .unwrap();
        assert_eq!(flagged.sigma_g, 0.5);
        assert!(flagged.summary.contains("stationarity_weights_valid=false"));
    }

    #[test]
    fn csv_shard_loading_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let shard_dir = dir.path().join("shards");
        fs::create_dir(&shard_dir).unwrap();
        for agent in 0..3 {
            let mut file = fs::File::create(shard_dir.join(format!("agent_{agent}.csv"))).unwrap();
            for row in 0..10 {
                let sign = if row % 2 == 0 { 1.0 } else { -1.0 };
                writeln!(file, "{},{},{}", sign, sign * 0.8 + 0.01 * row as f64, -sign * 0.3)
                    .unwrap();
            }
        }
        let text = SMOKE
            .replace("n_agents = 4", "n_agents = 3")
            .replace(
                "m_per_agent = 40\ndim = 3\nseparation = 2.0\nseed = 9",
                &format!("csv_dir = {:?}", shard_dir),
            )
            .replace("batch_size = 8", "batch_size = 4");
        let path = write_config(dir.path(), &text);
        let outcome = run_experiment(&path, &Overrides::default()).unwrap();
        assert_eq!(outcome.metrics.len(), 6);
        assert!(outcome.metrics.iter().all(|m| m.test_accuracy.is_nan()));
        assert!(outcome.summary.contains("final_test_acc=NaN"));
    }

    #[test]
    fn missing_synthetic_fields_are_config_errors() {
        let text = SMOKE.replace("m_per_agent = 40\n", "");
        let config: ExperimentConfig = toml::from_str(&text).unwrap();
        let err = run_loaded(&config, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("m_per_agent"));
    }

    #[test]
    fn empty_run_summary_is_rounds_only() {
        let constants = EstimatedConstants { smoothness: 1.0, heterogeneity: 0.0, sampling_noise: 0.0 };
        assert_eq!(emit_summary(&[], 1.0, 0.0, &constants), "rounds=0\n");
    }

    #[test]
    fn csv_reader_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "not,a,header\n").unwrap();
        assert!(matches!(
            read_metrics_csv(&path),
            Err(HarnessError::CsvFormat { .. })
        ));
        fs::write(&path, format!("{CSV_HEADER}\n0,1,2\n")).unwrap();
        assert!(matches!(
            read_metrics_csv(&path),
            Err(HarnessError::CsvFormat { .. })
        ));
        fs::write(&path, format!("{CSV_HEADER}\n0,1,2,3,4,5,6,K9\n")).unwrap();
        assert!(matches!(
            read_metrics_csv(&path),
            Err(HarnessError::CsvFormat { .. })
        ));
    }
}
