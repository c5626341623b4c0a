//! Per-round metrics, the communication cost model, and the reported
//! stationarity measure.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cost model times must be positive and finite")]
    InvalidCostModel,
    #[error("unknown regime label {0:?}")]
    UnknownRegime(String),
}

/// Gradient-norm regime of a round: `K1` when the network gradient norm at
/// the mean iterate is at least the clip threshold, `K2` below it. The
/// boundary counts as `K1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    K1,
    K2,
}

impl Regime {
    pub fn classify<T: Scalar>(grad_norm: T, clip_threshold: T) -> Regime {
        if grad_norm >= clip_threshold {
            Regime::K1
        } else {
            Regime::K2
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::K1 => "K1",
            Regime::K2 => "K2",
        })
    }
}

impl FromStr for Regime {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "K1" => Ok(Regime::K1),
            "K2" => Ok(Regime::K2),
            other => Err(MetricsError::UnknownRegime(other.to_string())),
        }
    }
}

/// Everything logged about one completed round, evaluated on the post-update
/// state at the network mean iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics<T> {
    /// Round index, 0-based.
    pub round: usize,
    /// |grad F(mean x)| over the training shards.
    pub grad_norm_at_mean: T,
    /// max_i |x_i - mean x|.
    pub consensus_error: T,
    pub train_accuracy: T,
    /// Accuracy on the held-out shards; NaN when no held-out data exists
    /// (CSV-imported datasets have none).
    pub test_accuracy: T,
    /// Rounds elapsed times the per-round cost of the algorithm under the
    /// configured cost model. Strictly increasing in the round index.
    pub model_time: T,
    /// Privacy spent through this round (max over agents); infinite when the
    /// run adds no noise.
    pub running_epsilon: T,
    pub regime: Regime,
}

/// Unit costs of the two primitives a round is made of: one minibatch
/// gradient (`t_g`) and one neighbor communication (`t_c`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel<T> {
    gradient_time: T,
    communication_time: T,
}

impl<T: Scalar> CostModel<T> {
    pub fn new(gradient_time: T, communication_time: T) -> Result<Self, MetricsError> {
        for v in [gradient_time, communication_time] {
            if v <= T::zero() || !v.is_finite() {
                return Err(MetricsError::InvalidCostModel);
            }
        }
        Ok(CostModel { gradient_time, communication_time })
    }

    pub fn gradient_time(&self) -> T {
        self.gradient_time
    }

    pub fn communication_time(&self) -> T {
        self.communication_time
    }
}

/// The decentralized algorithms the cost model can price.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostAlgorithm {
    /// This crate's algorithm: `tau` gradient steps, then one exchange.
    LtAdmmDp,
    /// Baseline that communicates twice per local gradient step.
    Porter,
    /// Baseline that takes two gradient passes per local step.
    Prisma,
}

/// Wall-clock units one round ("block" of `tau` local steps) costs.
pub fn cost_per_block<T: Scalar>(model: &CostModel<T>, algorithm: CostAlgorithm, tau: usize) -> T {
    let tau = T::from_count(tau);
    let tg = model.gradient_time;
    let tc = model.communication_time;
    match algorithm {
        CostAlgorithm::LtAdmmDp => tau * tg + tc,
        CostAlgorithm::Porter => tau * (tg + T::cast(2.0) * tc),
        CostAlgorithm::Prisma => tau * (T::cast(2.0) * tg + tc),
    }
}

/// Average stationarity measure of a run:
///
/// ```text
/// (1/K) [ sum_{k in K1} (zeta/4 - 2 sigma_g) |grad F(mean x_k)|
///       + sum_{k in K2} (1/4) |grad F(mean x_k)|^2 ]
/// ```
///
/// Rounds are classified against `clip_threshold` from their recorded
/// gradient norms (boundary to K1). Meaningful when
/// `clip_threshold > 8 * sigma_g`, otherwise the K1 weight can go negative;
/// callers surface that as a warning.
pub fn stationarity_measure<T: Scalar>(
    metrics: &[RoundMetrics<T>],
    clip_threshold: T,
    sampling_noise: T,
) -> T {
    if metrics.is_empty() {
        return T::zero();
    }
    let quarter = T::cast(0.25);
    let k1_weight = clip_threshold * quarter - T::cast(2.0) * sampling_noise;
    let mut total = T::zero();
    for m in metrics {
        let g = m.grad_norm_at_mean;
        total += match Regime::classify(g, clip_threshold) {
            Regime::K1 => k1_weight * g,
            Regime::K2 => quarter * g * g,
        };
    }
    total / T::from_count(metrics.len())
}

/// Whether the stationarity weights are all positive for this pair.
pub fn stationarity_weights_valid<T: Scalar>(clip_threshold: T, sampling_noise: T) -> bool {
    clip_threshold > T::cast(8.0) * sampling_noise
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CostModel<f64> {
        CostModel::new(0.1, 1.0).unwrap()
    }

    #[test]
    fn cost_table_for_the_reference_setting() {
        // tau = 4, t_g = 0.1, t_c = 1.
        assert_eq!(cost_per_block(&model(), CostAlgorithm::LtAdmmDp, 4), 1.4);
        assert_eq!(cost_per_block(&model(), CostAlgorithm::Porter, 4), 8.4);
        assert_eq!(cost_per_block(&model(), CostAlgorithm::Prisma, 4), 4.8);
    }

    #[test]
    fn local_steps_only_multiply_the_gradient_term() {
        let c1 = cost_per_block(&model(), CostAlgorithm::LtAdmmDp, 1);
        let c8 = cost_per_block(&model(), CostAlgorithm::LtAdmmDp, 8);
        assert!((c1 - 1.1).abs() < 1e-15);
        assert!((c8 - 1.8).abs() < 1e-15);
    }

    #[test]
    fn invalid_cost_model_is_rejected() {
        assert_eq!(CostModel::new(0.0, 1.0).unwrap_err(), MetricsError::InvalidCostModel);
        assert_eq!(CostModel::new(0.1, -1.0).unwrap_err(), MetricsError::InvalidCostModel);
        assert_eq!(
            CostModel::new(f64::INFINITY, 1.0).unwrap_err(),
            MetricsError::InvalidCostModel
        );
    }

    #[test]
    fn regime_boundary_goes_to_k1() {
        assert_eq!(Regime::classify(1.0, 1.0), Regime::K1);
        assert_eq!(Regime::classify(1.0 + 1e-12, 1.0), Regime::K1);
        assert_eq!(Regime::classify(1.0 - 1e-12, 1.0), Regime::K2);
    }

    #[test]
    fn regime_roundtrips_through_strings() {
        assert_eq!("K1".parse::<Regime>().unwrap(), Regime::K1);
        assert_eq!("K2".parse::<Regime>().unwrap(), Regime::K2);
        assert_eq!(Regime::K1.to_string(), "K1");
        assert!(matches!("k3".parse::<Regime>(), Err(MetricsError::UnknownRegime(_))));
    }

    fn row(round: usize, grad_norm: f64) -> RoundMetrics<f64> {
        RoundMetrics {
            round,
            grad_norm_at_mean: grad_norm,
            consensus_error: 0.0,
            train_accuracy: 0.5,
            test_accuracy: 0.5,
            model_time: 1.4 * (round + 1) as f64,
            running_epsilon: 0.1 * (round + 1) as f64,
            regime: Regime::classify(grad_norm, 1.0),
        }
    }

    #[test]
    fn stationarity_measure_mixes_both_regimes() {
        // zeta = 1, sigma_g = 0.05: K1 weight = 0.25 - 0.1 = 0.15.
        let metrics = vec![row(0, 2.0), row(1, 0.5)];
        let value = stationarity_measure(&metrics, 1.0, 0.05);
        let expected = (0.15 * 2.0 + 0.25 * 0.25) / 2.0;
        assert!((value - expected).abs() < 1e-15);
    }

    #[test]
    fn stationarity_measure_of_no_rounds_is_zero() {
        assert_eq!(stationarity_measure::<f64>(&[], 1.0, 0.0), 0.0);
    }

    #[test]
    fn stationarity_weight_validity_threshold() {
        assert!(stationarity_weights_valid(1.0, 0.05));
        assert!(!stationarity_weights_valid(1.0, 0.125));
        assert!(!stationarity_weights_valid(1.0, 0.2));
    }

    #[test]
    fn cost_model_works_at_f32() {
        let m = CostModel::<f32>::new(0.1, 1.0).unwrap();
        assert_eq!(cost_per_block(&m, CostAlgorithm::LtAdmmDp, 4), 1.4f32);
    }
}
