//! The nonconvex classification objective and its gradients.
//!
//! Per sample `(a, b)` with `b` in {-1, +1} the loss is
//!
//! ```text
//! loss(x) = log(1 + exp(-b * a.x)) + reg_weight * sum_l x_l^2 / (1 + x_l^2)
//! ```
//!
//! a logistic term plus a bounded nonconvex regularizer attached to every
//! sample. An agent's local objective f_i is the mean over its shard; the
//! network objective F is the mean of the f_i. The logistic term is evaluated
//! branch-wise through `ln_1p` so margins up to |a.x| ~ 1e3 neither overflow
//! nor lose the tail.
//!
//! Closed forms used below:
//! - d/dx logistic = -b * a * sigmoid(-b * a.x)
//! - d/dt [t^2/(1+t^2)] = 2t / (1+t^2)^2, bounded by 3*sqrt(3)/8 in magnitude
//! - per-sample curvature <= |a|^2/4 + 2*reg_weight, which gives the
//!   smoothness estimate below.

use rand::Rng;
use thiserror::Error;

use crate::data::{sample_minibatch, LocalShard, Minibatch};
use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("reg_weight must be non-negative and finite")]
    InvalidRegWeight,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("point has dimension {got}, objective expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("minibatch is empty")]
    EmptyBatch,
    #[error("minibatch index {index} outside shard of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("no shards given")]
    NoShards,
}

/// Problem description shared by every agent: regularization strength and
/// model dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec<T> {
    reg_weight: T,
    dim: usize,
}

impl<T: Scalar> ObjectiveSpec<T> {
    pub fn new(reg_weight: T, dim: usize) -> Result<Self, ObjectiveError> {
        if reg_weight < T::zero() || !reg_weight.is_finite() {
            return Err(ObjectiveError::InvalidRegWeight);
        }
        if dim == 0 {
            return Err(ObjectiveError::ZeroDimension);
        }
        Ok(ObjectiveSpec { reg_weight, dim })
    }

    pub fn reg_weight(&self) -> T {
        self.reg_weight
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_dim(&self, x: &[T]) -> Result<(), ObjectiveError> {
        if x.len() != self.dim {
            return Err(ObjectiveError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }
}

/// log(1 + exp(z)) without overflow on either branch.
fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// 1 / (1 + exp(-v)) evaluated on the branch that cannot overflow.
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Loss of one sample at `x`.
pub fn sample_loss<T: Scalar>(
    spec: &ObjectiveSpec<T>,
    x: &[T],
    a: &[T],
    b: T,
) -> Result<T, ObjectiveError> {
    spec.check_dim(x)?;
    spec.check_dim(a)?;
    let margin = b * linalg::dot(a, x);
    let mut loss = softplus(-margin);
    if spec.reg_weight > T::zero() {
        let reg: T = x.iter().map(|&t| t * t / (T::one() + t * t)).sum();
        loss += spec.reg_weight * reg;
    }
    Ok(loss)
}

/// Gradient of one sample's loss at `x`.
pub fn sample_grad<T: Scalar>(
    spec: &ObjectiveSpec<T>,
    x: &[T],
    a: &[T],
    b: T,
) -> Result<Vec<T>, ObjectiveError> {
    spec.check_dim(x)?;
    spec.check_dim(a)?;
    let margin = b * linalg::dot(a, x);
    // -b * a * sigmoid(-margin)
    let coeff = -b * sigmoid(-margin);
    let mut grad: Vec<T> = a.iter().map(|&ai| coeff * ai).collect();
    if spec.reg_weight > T::zero() {
        let two = T::cast(2.0);
        for (g, &t) in grad.iter_mut().zip(x) {
            let denom = T::one() + t * t;
            *g += spec.reg_weight * two * t / (denom * denom);
        }
    }
    Ok(grad)
}

/// Mean gradient over the minibatch rows of `shard` at `x`.
pub fn minibatch_grad<T: Scalar>(
    spec: &ObjectiveSpec<T>,
    shard: &LocalShard<T>,
    x: &[T],
    batch: &Minibatch,
) -> Result<Vec<T>, ObjectiveError> {
    if batch.indices.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut grad = vec![T::zero(); x.len()];
    for &index in &batch.indices {
        if index >= shard.len() {
            return Err(ObjectiveError::IndexOutOfRange { index, size: shard.len() });
        }
        let g = sample_grad(spec, x, shard.feature(index), shard.label(index))?;
        linalg::add_scaled(&mut grad, T::one(), &g);
    }
    let inv = T::one() / T::from_count(batch.indices.len());
    linalg::scale(&mut grad, inv);
    Ok(grad)
}

/// Full local gradient (mean over the whole shard) at `x`.
pub fn local_full_grad<T: Scalar>(
    spec: &ObjectiveSpec<T>,
    shard: &LocalShard<T>,
    x: &[T],
) -> Result<Vec<T>, ObjectiveError> {
    let mut grad = vec![T::zero(); x.len()];
    for index in 0..shard.len() {
        let g = sample_grad(spec, x, shard.feature(index), shard.label(index))?;
        linalg::add_scaled(&mut grad, T::one(), &g);
    }
    let inv = T::one() / T::from_count(shard.len());
    linalg::scale(&mut grad, inv);
    Ok(grad)
}

/// Local objective value f_i(x): mean loss over the shard.
pub fn local_loss<T: Scalar>(
    spec: &ObjectiveSpec<T>,
    shard: &LocalShard<T>,
    x: &[T],
) -> Result<T, ObjectiveError> {
    let mut total = T::zero();
    for index in 0..shard.len() {
        total += sample_loss(spec, x, shard.feature(index), shard.label(index))?;
    }
    Ok(total / T::from_count(shard.len()))
}

/// Network gradient (1/N) * sum_i grad f_i(x).
pub fn global_grad<T: Scalar>(
    spec: &ObjectiveSpec<T>,
    shards: &[LocalShard<T>],
    x: &[T],
) -> Result<Vec<T>, ObjectiveError> {
    if shards.is_empty() {
        return Err(ObjectiveError::NoShards);
    }
    let mut grad = vec![T::zero(); x.len()];
    for shard in shards {
        let g = local_full_grad(spec, shard, x)?;
        linalg::add_scaled(&mut grad, T::one(), &g);
    }
    let inv = T::one() / T::from_count(shards.len());
    linalg::scale(&mut grad, inv);
    Ok(grad)
}

/// Network objective F(x) = (1/N) * sum_i f_i(x).
pub fn global_loss<T: Scalar>(
    spec: &ObjectiveSpec<T>,
    shards: &[LocalShard<T>],
    x: &[T],
) -> Result<T, ObjectiveError> {
    if shards.is_empty() {
        return Err(ObjectiveError::NoShards);
    }
    let mut total = T::zero();
    for shard in shards {
        total += local_loss(spec, shard, x)?;
    }
    Ok(total / T::from_count(shards.len()))
}

/// Classification accuracy of `x` over the pooled shards.
/// Prediction is `sign(a.x)` with ties (zero score) counted as +1.
pub fn accuracy<T: Scalar>(shards: &[LocalShard<T>], x: &[T]) -> Result<T, ObjectiveError> {
    if shards.is_empty() {
        return Err(ObjectiveError::NoShards);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for shard in shards {
        for index in 0..shard.len() {
            let score = linalg::dot(shard.feature(index), x);
            let prediction = if score >= T::zero() { T::one() } else { -T::one() };
            if prediction == shard.label(index) {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(T::from_count(correct) / T::from_count(total))
}

/// Estimated problem constants used by step-size checks and the reported
/// stationarity measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatedConstants<T> {
    /// Smoothness bound L from per-sample curvature:
    /// max_i [ (1/(4 m_i)) * sum_h |a_{i,h}|^2 + 2 * reg_weight ].
    pub smoothness: T,
    /// Gradient heterogeneity: max over probes and agents of
    /// |grad F(x) - grad f_i(x)|.
    pub heterogeneity: T,
    /// Minibatch gradient deviation: 95th percentile of |minibatch - full|
    /// over 100 draws, maximized over probes and agents.
    pub sampling_noise: T,
}

/// Estimates (L, sigma_f, sigma_g) for the given shards.
///
/// Probe points are drawn uniformly from the ball of radius `probe_radius`.
/// `batch_size` is the minibatch size whose sampling noise is being measured;
/// values >= the shard size mean full-batch gradients (zero sampling noise).
pub fn estimate_constants<T: Scalar, R: Rng + ?Sized>(
    spec: &ObjectiveSpec<T>,
    shards: &[LocalShard<T>],
    probe_count: usize,
    probe_radius: T,
    batch_size: usize,
    stream: &mut R,
) -> Result<EstimatedConstants<T>, ObjectiveError> {
    if shards.is_empty() {
        return Err(ObjectiveError::NoShards);
    }

    // L is analytic given the data; no probing involved.
    let quarter = T::cast(0.25);
    let two = T::cast(2.0);
    let mut smoothness = T::zero();
    for shard in shards {
        let mut sum_sq = T::zero();
        for index in 0..shard.len() {
            sum_sq += linalg::norm_sq(shard.feature(index));
        }
        let local = quarter * sum_sq / T::from_count(shard.len()) + two * spec.reg_weight;
        smoothness = smoothness.max(local);
    }

    const NOISE_DRAWS: usize = 100;
    let mut heterogeneity = T::zero();
    let mut sampling_noise = T::zero();
    for _ in 0..probe_count {
        let x = ball_point(spec.dim, probe_radius, stream);
        let network = global_grad(spec, shards, &x)?;
        for shard in shards {
            let local = local_full_grad(spec, shard, &x)?;
            let gap = linalg::norm(&linalg::sub(&network, &local));
            heterogeneity = heterogeneity.max(gap);

            if batch_size >= shard.len() {
                continue; // full batch: deviation is identically zero
            }
            let mut deviations: Vec<T> = Vec::with_capacity(NOISE_DRAWS);
            for _ in 0..NOISE_DRAWS {
                let batch = sample_minibatch(shard, batch_size, stream)
                    .expect("batch_size < shard size checked above");
                let sampled = minibatch_grad(spec, shard, &x, &batch)?;
                deviations.push(linalg::norm(&linalg::sub(&sampled, &local)));
            }
            deviations.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            // Nearest-rank 95th percentile: the 95th smallest of 100.
            sampling_noise = sampling_noise.max(deviations[94]);
        }
    }

    Ok(EstimatedConstants { smoothness, heterogeneity, sampling_noise })
}

/// Uniform draw from the ball of the given radius.
fn ball_point<T: Scalar, R: Rng + ?Sized>(dim: usize, radius: T, rng: &mut R) -> Vec<T> {
    let mut v: Vec<T> = (0..dim).map(|_| T::standard_normal(rng)).collect();
    let n = linalg::norm(&v);
    if n > T::zero() {
        let u: T = T::cast(rng.random::<f64>());
        let r = radius * u.powf(T::one() / T::from_count(dim));
        linalg::scale(&mut v, r / n);
    }
    v
}

// ============================================================================
// Tests
// ============================================================================
