//! The decentralized training loop: local SGD blocks inside an ADMM outer
//! iteration, with optional clipping and Gaussian perturbation per step.
//!
//! # One round, agent i
//!
//! With step sizes `gamma` (primal), `beta` (dual), penalty `rho`, degree
//! `d_i`, and local steps `tau`:
//!
//! ```text
//! correction = beta * (rho * d_i * x_i - sum_j z_ij)     (held fixed)
//! phi^0 = x_i
//! phi^{t+1} = phi^t - (gamma * g(phi^t) + correction)    t = 0..tau-1
//! x_i <- phi^tau
//! ```
//!
//! `g` is a fresh minibatch gradient per inner step, soft-clipped then
//! perturbed when those modes are on. The correction uses the round-start
//! `x_i` and `z`, not the moving `phi`.
//!
//! After every agent finishes its block, each ordered pair of neighbors
//! exchanges one message: `i` sends `z_ij - 2 rho x_i` (with the fresh `x_i`)
//! to `j`, and on receipt `z_ji <- z_ji / 2 - payload / 2`.
//!
//! Two exact identities hold at every round and double as integration checks:
//! the sum of `z` over directed edges equals `rho * sum_i d_i x_i`
//! (conservation, guaranteed by initializing `z_ij = rho * x_i`), and the
//! change of the network mean equals `-(gamma / N)` times the sum of every
//! applied gradient (the corrections cancel across the network).

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::LocalShard;
use crate::dp::{self, LogBase, MechanismParams};
use crate::graph::{SpectralInfo, Topology};
use crate::linalg;
use crate::metrics::{cost_per_block, CostAlgorithm, CostModel, Regime, RoundMetrics};
use crate::objective::{self, ObjectiveSpec};
use crate::rng::{derive_stream, Purpose};
use crate::scalar::Scalar;

/// Coordinate magnitude beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("step sizes and penalty must be positive and finite (beta may be zero)")]
    InvalidStepSizes,
    #[error("tau must be at least 1")]
    ZeroLocalSteps,
    #[error("expected one shard per agent ({agents} agents, {shards} shards)")]
    ShardCountMismatch { agents: usize, shards: usize },
    #[error("agent {agent}: initial point has dimension {got}, expected {expected}")]
    InitDimensionMismatch { agent: usize, expected: usize, got: usize },
    #[error("iterate diverged at round {round}, inner step {inner_step}, agent {agent}")]
    Divergence { round: usize, inner_step: usize, agent: usize },
    #[error("agent {receiver} got no message from neighbor {expected_from}")]
    MissingMessage { receiver: usize, expected_from: usize },
    #[error("agent {receiver} got two messages from {sender}")]
    DuplicateMessage { receiver: usize, sender: usize },
    #[error("agent {receiver} got a message from non-neighbor {sender}")]
    UnexpectedSender { receiver: usize, sender: usize },
    #[error("message for agent {intended} delivered to agent {actual}")]
    WrongReceiver { intended: usize, actual: usize },
    #[error("gradient estimator failed: {0}")]
    Objective(#[from] objective::ObjectiveError),
    #[error("sampling failed: {0}")]
    Data(#[from] crate::data::DataError),
    #[error("privacy mechanism failed: {0}")]
    Dp(#[from] dp::DpError),
}

/// One agent's piece of the network state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState<T> {
    /// Current model iterate.
    pub x: Vec<T>,
    /// Dual-tracking variable per neighbor, keyed by neighbor id.
    pub z: BTreeMap<usize, Vec<T>>,
    /// Scratch buffer holding the last local-training trajectory endpoint.
    pub phi: Vec<T>,
}

/// Payload sent from `sender` to `receiver` after a round's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMessage<T> {
    pub sender: usize,
    pub receiver: usize,
    pub payload: Vec<T>,
}

/// Static configuration of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig<T> {
    pub gamma: T,
    pub beta: T,
    pub rho: T,
    pub tau: usize,
    pub rounds: usize,
    pub mechanism: MechanismParams<T>,
    pub clipping_enabled: bool,
    pub noise_enabled: bool,
    /// Use the whole shard each inner step instead of sampling.
    pub full_batch: bool,
    pub master_seed: u64,
    /// Worker threads for the per-agent local-training phase. Any value
    /// produces bitwise-identical results; this only trades wall clock.
    pub workers: usize,
}

impl<T: Scalar> RunConfig<T> {
    pub fn validate(&self) -> Result<(), AdmmError> {
        let positive = |v: T| v > T::zero() && v.is_finite();
        if !positive(self.gamma) || !positive(self.rho) {
            return Err(AdmmError::InvalidStepSizes);
        }
        if self.beta < T::zero() || !self.beta.is_finite() {
            return Err(AdmmError::InvalidStepSizes);
        }
        if self.tau == 0 {
            return Err(AdmmError::ZeroLocalSteps);
        }
        Ok(())
    }
}

/// Builds the initial network state with `z_ij = rho * x_i` for every
/// directed edge, which plants the conservation identity at round zero.
pub fn init_state<T: Scalar>(
    topology: &Topology,
    initial: &[Vec<T>],
    rho: T,
) -> Result<Vec<AgentState<T>>, AdmmError> {
    if initial.len() != topology.n_agents() {
        return Err(AdmmError::ShardCountMismatch {
            agents: topology.n_agents(),
            shards: initial.len(),
        });
    }
    let dim = initial[0].len();
    let mut states = Vec::with_capacity(initial.len());
    for (agent, x0) in initial.iter().enumerate() {
        if x0.len() != dim {
            return Err(AdmmError::InitDimensionMismatch {
                agent,
                expected: dim,
                got: x0.len(),
            });
        }
        let mut z = BTreeMap::new();
        for &j in topology.neighbors(agent) {
            z.insert(j, x0.iter().map(|&v| rho * v).collect());
        }
        states.push(AgentState { x: x0.clone(), z, phi: x0.clone() });
    }
    Ok(states)
}

/// Runs one agent's block of `tau` local steps. Reads `state.x` and
/// `state.z`, writes `state.x` and `state.phi`, and returns the gradients as
/// they were applied (post clip, post noise), one per inner step.
pub fn local_train<T: Scalar>(
    agent: usize,
    state: &mut AgentState<T>,
    shard: &LocalShard<T>,
    spec: &ObjectiveSpec<T>,
    cfg: &RunConfig<T>,
    round: usize,
) -> Result<Vec<Vec<T>>, AdmmError> {
    let degree = T::from_count(state.z.len());
    // beta * (rho * d_i * x_i - sum_j z_ij), frozen for the whole block.
    let mut correction: Vec<T> =
        state.x.iter().map(|&v| cfg.rho * degree * v).collect();
    for z in state.z.values() {
        linalg::add_scaled(&mut correction, -T::one(), z);
    }
    linalg::scale(&mut correction, cfg.beta);

    let limit = T::cast(DIVERGENCE_LIMIT);
    let mut phi = state.x.clone();
    let mut applied = Vec::with_capacity(cfg.tau);
    for t in 0..cfg.tau {
        let mut g = if cfg.full_batch {
            objective::local_full_grad(spec, shard, &phi)?
        } else {
            let mut batch_rng =
                derive_stream(cfg.master_seed, Purpose::Batch, agent, round, t);
            let batch =
                crate::data::sample_minibatch(shard, cfg.mechanism.batch_size(), &mut batch_rng)?;
            objective::minibatch_grad(spec, shard, &phi, &batch)?
        };
        if cfg.clipping_enabled {
            g = dp::clip(&g, cfg.mechanism.clip_threshold())?;
        }
        if cfg.noise_enabled {
            let mut noise_rng = derive_stream(cfg.master_seed, Purpose::Noise, agent, round, t);
            dp::perturb(&mut g, cfg.mechanism.noise_std(), &mut noise_rng)?;
        }

        for l in 0..phi.len() {
            phi[l] -= cfg.gamma * g[l] + correction[l];
            if !phi[l].is_finite() || phi[l].abs() > limit {
                return Err(AdmmError::Divergence { round, inner_step: t, agent });
            }
        }
        applied.push(g);
    }
    state.x = phi.clone();
    state.phi = phi;
    Ok(applied)
}

/// Messages `agent` sends after finishing its local block: one per neighbor,
/// carrying `z_ij - 2 rho x_i` with the just-updated `x_i`.
pub fn make_messages<T: Scalar>(
    agent: usize,
    state: &AgentState<T>,
    topology: &Topology,
    rho: T,
) -> Vec<EdgeMessage<T>> {
    let two_rho = T::cast(2.0) * rho;
    topology
        .neighbors(agent)
        .iter()
        .map(|&j| {
            let z = &state.z[&j];
            let payload = z
                .iter()
                .zip(&state.x)
                .map(|(&zl, &xl)| zl - two_rho * xl)
                .collect();
            EdgeMessage { sender: agent, receiver: j, payload }
        })
        .collect()
}

/// Applies the dual update `z_ji <- z_ji / 2 - payload / 2` for every
/// incoming message. Exactly one message per neighbor is required.
pub fn apply_z_update<T: Scalar>(
    agent: usize,
    state: &mut AgentState<T>,
    incoming: &[EdgeMessage<T>],
    topology: &Topology,
) -> Result<(), AdmmError> {
    let mut seen: BTreeMap<usize, bool> =
        topology.neighbors(agent).iter().map(|&j| (j, false)).collect();
    let half = T::cast(0.5);
    for message in incoming {
        if message.receiver != agent {
            return Err(AdmmError::WrongReceiver { intended: message.receiver, actual: agent });
        }
        match seen.get_mut(&message.sender) {
            None => {
                return Err(AdmmError::UnexpectedSender { receiver: agent, sender: message.sender })
            }
            Some(s) if *s => {
                return Err(AdmmError::DuplicateMessage { receiver: agent, sender: message.sender })
            }
            Some(s) => *s = true,
        }
        let z = state.z.get_mut(&message.sender).expect("sender is a neighbor");
        for (zl, &pl) in z.iter_mut().zip(&message.payload) {
            *zl = half * *zl - half * pl;
        }
    }
    if let Some((&j, _)) = seen.iter().find(|(_, &s)| !s) {
        return Err(AdmmError::MissingMessage { receiver: agent, expected_from: j });
    }
    Ok(())
}

/// Advances the whole network one round: parallel local blocks, then the
/// synchronous exchange and dual update. Returns the applied gradients,
/// indexed `[agent][inner_step]`.
pub fn run_round<T: Scalar>(
    states: &mut [AgentState<T>],
    shards: &[LocalShard<T>],
    spec: &ObjectiveSpec<T>,
    cfg: &RunConfig<T>,
    topology: &Topology,
    round: usize,
) -> Result<Vec<Vec<Vec<T>>>, AdmmError> {
    // Collect every agent's outcome before surfacing any error, so the
    // reported failure does not depend on scheduling.
    let outcomes: Vec<Result<Vec<Vec<T>>, AdmmError>> = states
        .par_iter_mut()
        .enumerate()
        .map(|(agent, state)| local_train(agent, state, &shards[agent], spec, cfg, round))
        .collect();
    let mut logs = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        logs.push(outcome?);
    }

    let mut inbox: Vec<Vec<EdgeMessage<T>>> = vec![Vec::new(); states.len()];
    for (agent, state) in states.iter().enumerate() {
        for message in make_messages(agent, state, topology, cfg.rho) {
            inbox[message.receiver].push(message);
        }
    }
    for (agent, messages) in inbox.iter().enumerate() {
        apply_z_update(agent, &mut states[agent], messages, topology)?;
    }
    Ok(logs)
}

// ============================================================================
// Full-run driver and evaluation
// ============================================================================

/// Everything needed to turn a post-round network state into a metrics row.
pub struct Evaluator<'a, T> {
    spec: &'a ObjectiveSpec<T>,
    test_shards: Option<&'a [LocalShard<T>]>,
    cost_per_round: T,
    delta: T,
    log_base: LogBase,
    /// Per-agent accountant parameters; `None` when the run spends no
    /// finite budget (noise off, or full-batch so no subsampling).
    epsilon_params: Option<Vec<MechanismParams<T>>>,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    pub fn new(
        spec: &'a ObjectiveSpec<T>,
        train_shards: &[LocalShard<T>],
        test_shards: Option<&'a [LocalShard<T>]>,
        cost_model: &CostModel<T>,
        cfg: &RunConfig<T>,
        delta: T,
        log_base: LogBase,
    ) -> Result<Self, AdmmError> {
        let accounted =
            cfg.noise_enabled && cfg.mechanism.noise_std() > T::zero() && !cfg.full_batch;
        let epsilon_params = if accounted {
            let mut params = Vec::with_capacity(train_shards.len());
            for shard in train_shards {
                params.push(MechanismParams::new(
                    cfg.mechanism.clip_threshold(),
                    cfg.mechanism.noise_std(),
                    cfg.mechanism.batch_size(),
                    shard.len(),
                )?);
            }
            Some(params)
        } else {
            None
        };
        Ok(Evaluator {
            spec,
            test_shards,
            cost_per_round: cost_per_block(cost_model, CostAlgorithm::LtAdmmDp, cfg.tau),
            delta,
            log_base,
            epsilon_params,
        })
    }

    /// Privacy spent after `rounds_done` rounds: the worst agent's budget,
    /// or infinity when the run is not noise-perturbed.
    pub fn running_epsilon(&self, rounds_done: usize, tau: usize) -> Result<T, AdmmError> {
        match &self.epsilon_params {
            None => Ok(T::infinity()),
            Some(params) => {
                let mut worst = T::zero();
                for p in params {
                    let e =
                        dp::running_epsilon_with_log(p, rounds_done, tau, self.delta, self.log_base)?;
                    worst = worst.max(e);
                }
                Ok(worst)
            }
        }
    }

    /// Metrics row for the state after round `round` (0-based) has finished.
    pub fn evaluate(
        &self,
        round: usize,
        states: &[AgentState<T>],
        train_shards: &[LocalShard<T>],
        cfg: &RunConfig<T>,
    ) -> Result<RoundMetrics<T>, AdmmError> {
        let xs: Vec<Vec<T>> = states.iter().map(|s| s.x.clone()).collect();
        let mean = linalg::mean(&xs);
        let grad = objective::global_grad(self.spec, train_shards, &mean)?;
        let grad_norm = linalg::norm(&grad);
        let consensus_error = xs
            .iter()
            .map(|x| linalg::norm(&linalg::sub(x, &mean)))
            .fold(T::zero(), T::max);
        let train_accuracy = objective::accuracy(train_shards, &mean)?;
        let test_accuracy = match self.test_shards {
            Some(shards) => objective::accuracy(shards, &mean)?,
            None => T::nan(),
        };
        Ok(RoundMetrics {
            round,
            grad_norm_at_mean: grad_norm,
            consensus_error,
            train_accuracy,
            test_accuracy,
            model_time: T::from_count(round + 1) * self.cost_per_round,
            running_epsilon: self.running_epsilon(round + 1, cfg.tau)?,
            regime: Regime::classify(grad_norm, cfg.mechanism.clip_threshold()),
        })
    }
}

/// A failed run, carrying the metric rows of every round that completed
/// before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct RunFailure<T: fmt::Debug + 'static> {
    pub error: AdmmError,
    pub completed: Vec<RoundMetrics<T>>,
}

/// Runs the configured number of rounds from `x_i = 0`, evaluating metrics
/// after every round.
pub fn run<T: Scalar>(
    cfg: &RunConfig<T>,
    topology: &Topology,
    shards: &[LocalShard<T>],
    evaluator: &Evaluator<'_, T>,
) -> Result<Vec<RoundMetrics<T>>, Box<RunFailure<T>>> {
    let fail = |error: AdmmError, completed: Vec<RoundMetrics<T>>| {
        Box::new(RunFailure { error, completed })
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, Vec::new()));
    }
    if shards.len() != topology.n_agents() {
        return Err(fail(
            AdmmError::ShardCountMismatch {
                agents: topology.n_agents(),
                shards: shards.len(),
            },
            Vec::new(),
        ));
    }
    let dim = shards[0].dim();
    let zeros = vec![vec![T::zero(); dim]; topology.n_agents()];
    let mut states = match init_state(topology, &zeros, cfg.rho) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, Vec::new())),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .expect("worker pool");
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let step = pool.install(|| run_round(&mut states, shards, evaluator.spec, cfg, topology, round));
        if let Err(e) = step {
            return Err(fail(e, metrics));
        }
        match evaluator.evaluate(round, &states, shards, cfg) {
            Ok(row) => metrics.push(row),
            Err(e) => return Err(fail(e, metrics)),
        }
    }
    Ok(metrics)
}

// ============================================================================
// Step-size checks
// ============================================================================

/// Outcome of the pre-run step-size validation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepsizeReport<T> {
    pub beta: T,
    /// Hard stability limit `2 / (tau * lambda_max * rho)`; `beta` must stay
    /// strictly below it.
    pub beta_limit: T,
    pub beta_ok: bool,
    pub gamma: T,
    /// Heuristic comfort threshold `lambda_min_nonzero / (L * tau^2)`.
    pub gamma_threshold: T,
    /// False means gamma exceeds the heuristic threshold; advisory only.
    pub gamma_comfortable: bool,
}

impl<T: Scalar> fmt::Display for StepsizeReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "beta check: {} (beta={}, limit={})",
            if self.beta_ok { "PASS" } else { "FAIL" },
            self.beta,
            self.beta_limit
        )?;
        write!(
            f,
            "gamma heuristic: {} (gamma={}, threshold={})",
            if self.gamma_comfortable { "OK" } else { "WARN" },
            self.gamma,
            self.gamma_threshold
        )
    }
}

/// Checks `beta` against its spectral stability limit (hard, strict) and
/// `gamma` against a smoothness heuristic (advisory). The heuristic scale
/// constant is 1; the sharp constant involves network quantities that have
/// no closed form, so treat WARN as advice to re-run with a smaller gamma,
/// not as a guarantee of failure.
pub fn stepsize_check<T: Scalar>(
    cfg: &RunConfig<T>,
    spectrum: &SpectralInfo<T>,
    smoothness: T,
) -> StepsizeReport<T> {
    let beta_limit = crate::graph::beta_bound(spectrum, cfg.tau, cfg.rho);
    let tau = T::from_count(cfg.tau);
    let gamma_threshold = spectrum.lambda_min_nonzero / (smoothness * tau * tau);
    StepsizeReport {
        beta: cfg.beta,
        beta_limit,
        beta_ok: cfg.beta < beta_limit,
        gamma: cfg.gamma,
        gamma_threshold,
        gamma_comfortable: cfg.gamma <= gamma_threshold,
    }
}

// ============================================================================
// Tests
// ============================================================================
