//! Differential privacy: gradient clipping, Gaussian perturbation, and the
//! Renyi-DP accountant for the subsampled mechanism.
//!
//! # Mechanism
//!
//! Each local step clips the stochastic gradient with the soft factor
//! `mu = zeta / (zeta + |g|)`, which keeps the output norm strictly below
//! `zeta` while preserving direction, then adds isotropic Gaussian noise of
//! standard deviation `sigma_e`. Replacing one record changes the clipped
//! minibatch mean by at most `2 * zeta * batch_size / dataset_size` in the
//! regime the accountant covers, so one step of the Gaussian mechanism costs
//!
//! ```text
//! rdp(alpha) = 2 * alpha * zeta^2 * batch_size^2 / (sigma_e^2 * dataset_size^2)
//! ```
//!
//! at Renyi order `alpha`. RDP composes additively over the `K * tau` steps
//! of a run, and converts to (epsilon, delta)-DP via
//! `epsilon = rdp(alpha) + log(1/delta) / (alpha - 1)`.
//!
//! # Closed-form budget
//!
//! Writing `A = 2 K tau zeta^2 |B|^2 / (sigma_e^2 m^2)` for the composed RDP
//! coefficient, the conversion objective `A * alpha + log(1/delta)/(alpha-1)`
//! is minimized at `alpha* = 1 + sqrt(log(1/delta) / A)`, giving
//!
//! ```text
//! epsilon = A + 2 * sqrt(A * log(1/delta))
//! ```
//!
//! The linear-in-alpha RDP bound is only accurate while
//! `alpha << sigma_e^2 * m / |B|`; [`PrivacyBudget::validity_margin`] tracks
//! the ratio and anything above 0.1 should be treated as a warning.
//!
//! Logarithms are natural by default. [`LogBase::Base`] swaps every
//! `log(1/delta)` above for the chosen base, which exists to reproduce
//! figures computed with base-10 budgets; it scales epsilon, it does not
//! change the mechanism.

use rand::Rng;
use thiserror::Error;

use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("clip threshold must be positive and finite")]
    InvalidClipThreshold,
    #[error("noise standard deviation must be non-negative and finite")]
    InvalidNoiseStd,
    #[error("batch size {batch_size} must be in 1..{dataset_size}")]
    InvalidBatchSize { batch_size: usize, dataset_size: usize },
    #[error("gradient has a non-finite coordinate")]
    NonFiniteGradient,
    #[error("noise std must be positive to account privacy (zero noise has no finite budget)")]
    ZeroNoise,
    #[error("Renyi order alpha must exceed 1")]
    InvalidAlpha,
    #[error("delta must lie strictly inside (0, 1)")]
    InvalidDelta,
    #[error("target epsilon must be positive and finite")]
    InvalidEpsilon,
    #[error("step counts K and tau must be positive")]
    ZeroSteps,
    #[error("log base must be finite and exceed 1")]
    InvalidLogBase,
}

/// Per-step mechanism description: soft-clip threshold, noise level, and the
/// subsampling ratio `batch_size / dataset_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismParams<T> {
    clip_threshold: T,
    noise_std: T,
    batch_size: usize,
    dataset_size: usize,
}

impl<T: Scalar> MechanismParams<T> {
    pub fn new(
        clip_threshold: T,
        noise_std: T,
        batch_size: usize,
        dataset_size: usize,
    ) -> Result<Self, DpError> {
        if clip_threshold <= T::zero() || !clip_threshold.is_finite() {
            return Err(DpError::InvalidClipThreshold);
        }
        if noise_std < T::zero() || !noise_std.is_finite() {
            return Err(DpError::InvalidNoiseStd);
        }
        if batch_size == 0 || batch_size >= dataset_size {
            return Err(DpError::InvalidBatchSize { batch_size, dataset_size });
        }
        Ok(MechanismParams { clip_threshold, noise_std, batch_size, dataset_size })
    }

    pub fn clip_threshold(&self) -> T {
        self.clip_threshold
    }

    pub fn noise_std(&self) -> T {
        self.noise_std
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    /// Subsampling ratio |B| / m.
    fn ratio(&self) -> T {
        T::from_count(self.batch_size) / T::from_count(self.dataset_size)
    }
}

/// Which logarithm the RDP-to-DP conversion uses. `Natural` is the default;
/// `Base(b)` is for reproducing budgets quoted in another base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogBase {
    Natural,
    Base(f64),
}

impl LogBase {
    fn validate(self) -> Result<(), DpError> {
        match self {
            LogBase::Natural => Ok(()),
            LogBase::Base(b) if b.is_finite() && b > 1.0 => Ok(()),
            LogBase::Base(_) => Err(DpError::InvalidLogBase),
        }
    }

    /// log_base(1/delta).
    fn log_inv_delta<T: Scalar>(self, delta: T) -> T {
        let natural = -delta.ln();
        match self {
            LogBase::Natural => natural,
            LogBase::Base(b) => natural / T::cast(b).ln(),
        }
    }
}

impl std::str::FromStr for LogBase {
    type Err = DpError;

    /// Accepts `e`, `ln`, or `natural` for the natural logarithm, otherwise
    /// a numeric base greater than 1 (for example `10`).
    fn from_str(text: &str) -> Result<Self, DpError> {
        let trimmed = text.trim();
        let base = if trimmed.eq_ignore_ascii_case("e")
            || trimmed.eq_ignore_ascii_case("ln")
            || trimmed.eq_ignore_ascii_case("natural")
        {
            LogBase::Natural
        } else {
            LogBase::Base(trimmed.parse().map_err(|_| DpError::InvalidLogBase)?)
        };
        base.validate()?;
        Ok(base)
    }
}

/// Composed privacy budget of a full run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget<T> {
    /// Total (epsilon, delta)-DP cost at the optimal Renyi order.
    pub epsilon: T,
    pub delta: T,
    /// The Renyi order minimizing the conversion objective.
    pub optimal_alpha: T,
    /// Composed RDP value at `optimal_alpha`.
    pub rdp_at_optimal_alpha: T,
    /// `optimal_alpha / (sigma_e^2 m / |B|)`; above 0.1 the linear RDP bound
    /// is outside its comfort zone and the budget should be treated as
    /// optimistic.
    pub validity_margin: T,
}

impl<T: Scalar> PrivacyBudget<T> {
    /// Whether `optimal_alpha` sits safely inside the regime where the
    /// per-step RDP bound holds.
    pub fn alpha_in_valid_regime(&self) -> bool {
        self.validity_margin <= T::cast(0.1)
    }
}

// ============================================================================
// Mechanism primitives
// ============================================================================

/// Soft clip: scales `g` by `zeta / (zeta + |g|)`.
///
/// The output norm is `zeta * |g| / (zeta + |g|)`, strictly below `zeta` for
/// every finite input, equal to `zeta / 2` exactly when `|g| = zeta`, and the
/// direction of `g` is unchanged. The zero vector maps to itself.
pub fn clip<T: Scalar>(g: &[T], clip_threshold: T) -> Result<Vec<T>, DpError> {
    if clip_threshold <= T::zero() || !clip_threshold.is_finite() {
        return Err(DpError::InvalidClipThreshold);
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(DpError::NonFiniteGradient);
    }
    let norm = linalg::norm(g);
    let mu = clip_threshold / (clip_threshold + norm);
    Ok(g.iter().map(|&v| mu * v).collect())
}

/// Adds iid `N(0, noise_std^2)` to every coordinate. `noise_std = 0` is the
/// identity (and consumes no draws).
pub fn perturb<T: Scalar, R: Rng + ?Sized>(
    g: &mut [T],
    noise_std: T,
    stream: &mut R,
) -> Result<(), DpError> {
    if noise_std < T::zero() || !noise_std.is_finite() {
        return Err(DpError::InvalidNoiseStd);
    }
    if noise_std == T::zero() {
        return Ok(());
    }
    for v in g.iter_mut() {
        *v += noise_std * T::standard_normal(stream);
    }
    Ok(())
}

// ============================================================================
// Accountant
// ============================================================================

/// RDP cost of a single local step at Renyi order `alpha`.
pub fn rdp_per_step<T: Scalar>(params: &MechanismParams<T>, alpha: T) -> Result<T, DpError> {
    if params.noise_std == T::zero() {
        return Err(DpError::ZeroNoise);
    }
    if alpha <= T::one() || !alpha.is_finite() {
        return Err(DpError::InvalidAlpha);
    }
    let two = T::cast(2.0);
    let zr = params.clip_threshold * params.ratio();
    Ok(two * alpha * zr * zr / (params.noise_std * params.noise_std))
}

fn check_delta<T: Scalar>(delta: T) -> Result<(), DpError> {
    if !delta.is_finite() || delta <= T::zero() || delta >= T::one() {
        return Err(DpError::InvalidDelta);
    }
    Ok(())
}

fn check_steps(rounds: usize, local_steps: usize) -> Result<(), DpError> {
    if rounds == 0 || local_steps == 0 {
        return Err(DpError::ZeroSteps);
    }
    Ok(())
}

/// Composed RDP coefficient A such that rdp(alpha) = A * alpha over the whole
/// run of `rounds * local_steps` mechanism invocations.
pub fn composed_coefficient<T: Scalar>(
    params: &MechanismParams<T>,
    rounds: usize,
    local_steps: usize,
) -> Result<T, DpError> {
    let steps = T::from_count(rounds) * T::from_count(local_steps);
    // rdp_per_step at alpha slightly above 1 gives the per-alpha slope.
    let slope = rdp_per_step(params, T::cast(2.0))? / T::cast(2.0);
    Ok(steps * slope)
}

/// Total budget of `rounds * local_steps` composed steps, converted at the
/// closed-form optimal Renyi order. Natural-log conversion.
pub fn compose_budget<T: Scalar>(
    params: &MechanismParams<T>,
    rounds: usize,
    local_steps: usize,
    delta: T,
) -> Result<PrivacyBudget<T>, DpError> {
    compose_budget_with_log(params, rounds, local_steps, delta, LogBase::Natural)
}

/// [`compose_budget`] with an explicit conversion log base.
pub fn compose_budget_with_log<T: Scalar>(
    params: &MechanismParams<T>,
    rounds: usize,
    local_steps: usize,
    delta: T,
    log_base: LogBase,
) -> Result<PrivacyBudget<T>, DpError> {
    check_steps(rounds, local_steps)?;
    check_delta(delta)?;
    log_base.validate()?;
    let a = composed_coefficient(params, rounds, local_steps)?;
    let log_term = log_base.log_inv_delta(delta);

    let optimal_alpha = T::one() + (log_term / a).sqrt();
    let rdp_at_optimal_alpha = a * optimal_alpha;
    let epsilon = rdp_at_optimal_alpha + log_term / (optimal_alpha - T::one());

    let sigma_sq_m_over_b = params.noise_std * params.noise_std
        * T::from_count(params.dataset_size)
        / T::from_count(params.batch_size);
    let validity_margin = optimal_alpha / sigma_sq_m_over_b;

    Ok(PrivacyBudget {
        epsilon,
        delta,
        optimal_alpha,
        rdp_at_optimal_alpha,
        validity_margin,
    })
}

/// Conversion objective `A * alpha + log(1/delta) / (alpha - 1)` at a given
/// order; what [`compose_budget`] minimizes over `alpha`.
pub fn conversion_objective<T: Scalar>(
    params: &MechanismParams<T>,
    rounds: usize,
    local_steps: usize,
    delta: T,
    alpha: T,
    log_base: LogBase,
) -> Result<T, DpError> {
    check_steps(rounds, local_steps)?;
    check_delta(delta)?;
    log_base.validate()?;
    if alpha <= T::one() || alpha.is_nan() {
        return Err(DpError::InvalidAlpha);
    }
    let a = composed_coefficient(params, rounds, local_steps)?;
    Ok(a * alpha + log_base.log_inv_delta(delta) / (alpha - T::one()))
}

/// Smallest noise std achieving `target_epsilon` for the given run shape.
/// Natural-log conversion; see [`calibrate_noise_with_log`].
pub fn calibrate_noise<T: Scalar>(
    target_epsilon: T,
    delta: T,
    rounds: usize,
    local_steps: usize,
    clip_threshold: T,
    batch_size: usize,
    dataset_size: usize,
) -> Result<T, DpError> {
    calibrate_noise_with_log(
        target_epsilon,
        delta,
        rounds,
        local_steps,
        clip_threshold,
        batch_size,
        dataset_size,
        LogBase::Natural,
    )
}

/// Inverts the closed-form budget in `sigma_e`.
///
/// With `u = 1/sigma_e` the budget reads `epsilon = P u^2 + Q u` where
/// `P = 2 K tau zeta^2 |B|^2 / m^2` and
/// `Q = (2 zeta |B| / m) sqrt(2 K tau log(1/delta))`; the positive root is
/// `u = (-Q + sqrt(Q^2 + 4 P epsilon)) / (2 P)`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_noise_with_log<T: Scalar>(
    target_epsilon: T,
    delta: T,
    rounds: usize,
    local_steps: usize,
    clip_threshold: T,
    batch_size: usize,
    dataset_size: usize,
    log_base: LogBase,
) -> Result<T, DpError> {
    if target_epsilon <= T::zero() || !target_epsilon.is_finite() {
        return Err(DpError::InvalidEpsilon);
    }
    check_steps(rounds, local_steps)?;
    check_delta(delta)?;
    log_base.validate()?;
    if clip_threshold <= T::zero() || !clip_threshold.is_finite() {
        return Err(DpError::InvalidClipThreshold);
    }
    if batch_size == 0 || batch_size >= dataset_size {
        return Err(DpError::InvalidBatchSize { batch_size, dataset_size });
    }

    let two = T::cast(2.0);
    let steps = T::from_count(rounds) * T::from_count(local_steps);
    let ratio = T::from_count(batch_size) / T::from_count(dataset_size);
    let zr = clip_threshold * ratio;
    let p = two * steps * zr * zr;
    let q = two * zr * (two * steps * log_base.log_inv_delta(delta)).sqrt();

    let u = (-q + (q * q + T::cast(4.0) * p * target_epsilon).sqrt()) / (two * p);
    Ok(T::one() / u)
}

/// Budget spent after `rounds_so_far` rounds of `local_steps` steps each.
/// Zero rounds have cost zero by convention.
pub fn running_epsilon<T: Scalar>(
    params: &MechanismParams<T>,
    rounds_so_far: usize,
    local_steps: usize,
    delta: T,
) -> Result<T, DpError> {
    running_epsilon_with_log(params, rounds_so_far, local_steps, delta, LogBase::Natural)
}

/// [`running_epsilon`] with an explicit conversion log base.
pub fn running_epsilon_with_log<T: Scalar>(
    params: &MechanismParams<T>,
    rounds_so_far: usize,
    local_steps: usize,
    delta: T,
    log_base: LogBase,
) -> Result<T, DpError> {
    if rounds_so_far == 0 {
        check_delta(delta)?;
        return Ok(T::zero());
    }
    Ok(compose_budget_with_log(params, rounds_so_far, local_steps, delta, log_base)?.epsilon)
}

// ============================================================================
// Tests
// ============================================================================


#[cfg(test)]
mod property_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn clipped_norm_is_strictly_below_threshold(
            g in prop::collection::vec(-1e6f64..1e6, 1..64),
            zeta in 1e-3f64..1e3,
        ) {
            let out = clip(&g, zeta).unwrap();
            prop_assert!(linalg::norm(&out) < zeta);
        }

        #[test]
        fn clipping_is_a_contraction(
            g in prop::collection::vec(-1e3f64..1e3, 1..16),
            zeta in 1e-2f64..1e2,
        ) {
            let out = clip(&g, zeta).unwrap();
            prop_assert!(linalg::norm(&out) <= linalg::norm(&g) + 1e-12);
        }

        #[test]
        fn budget_epsilon_is_positive_and_alpha_exceeds_one(
            zeta in 0.01f64..10.0,
            sigma in 0.01f64..10.0,
            batch in 1usize..100,
            rounds in 1usize..5000,
            tau in 1usize..10,
        ) {
            let p = MechanismParams::new(zeta, sigma, batch, 1000).unwrap();
            let b = compose_budget(&p, rounds, tau, 1e-4).unwrap();
            prop_assert!(b.epsilon > 0.0);
            prop_assert!(b.optimal_alpha > 1.0);
            prop_assert!(b.rdp_at_optimal_alpha > 0.0);
        }

        #[test]
        fn calibration_inverts_composition(
            target in 0.01f64..100.0,
            zeta in 0.1f64..5.0,
            batch in 1usize..50,
            rounds in 1usize..2000,
        ) {
            let sigma = calibrate_noise(target, 1e-5, rounds, 4, zeta, batch, 500).unwrap();
            prop_assert!(sigma > 0.0);
            let p = MechanismParams::new(zeta, sigma, batch, 500).unwrap();
            let achieved = compose_budget(&p, rounds, 4, 1e-5).unwrap().epsilon;
            prop_assert!((achieved - target).abs() / target < 1e-9);
        }
    }
}
