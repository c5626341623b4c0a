//! Per-agent datasets: synthetic generation, minibatch sampling, CSV import.
//!
//! Synthetic data follows a planted linear classifier. A ground-truth weight
//! vector `w*` is drawn uniformly on the unit sphere, features are standard
//! normal (optionally mean-shifted per agent to induce heterogeneity), and
//! the label of a point `a` is `sign(a . w* + eta / separation)` with `eta`
//! standard normal. `separation = inf` gives clean separable labels,
//! `separation = 0` gives labels independent of the features. Points are
//! drawn against an alternating target-label sequence (rejection sampling on
//! the label), so every shard is balanced to within one point by
//! construction; the conditional feature distribution per class is unchanged.

use rand::Rng;
use thiserror::Error;

use crate::linalg;
use crate::rng::{derive_stream, Purpose};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("shard is empty")]
    EmptyShard,
    #[error("batch size {batch_size} must be in 1..{dataset_size} (strictly smaller than the shard)")]
    InvalidBatchSize { batch_size: usize, dataset_size: usize },
    #[error("feature dimension must be positive")]
    ZeroDimension,
    #[error("m_per_agent must be positive")]
    ZeroPoints,
    #[error("n_agents must be positive")]
    ZeroAgents,
    #[error("separation must be non-negative (inf allowed for clean labels)")]
    NegativeSeparation,
    #[error("could not draw a point with label {target:+} after {attempts} tries; the requested distribution is too one-sided for balanced shards")]
    BalanceUnreachable { target: i8, attempts: usize },
    #[error("row {row} of {path}: expected label then {dim} features, got {got} fields")]
    RowWidth { path: String, row: usize, dim: usize, got: usize },
    #[error("row {row} of {path}: label must be +1 or -1, got {value}")]
    BadLabel { path: String, row: usize, value: f64 },
    #[error("row {row} of {path}: {message}")]
    RowParse { path: String, row: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One agent's private dataset: `m_i` feature vectors with labels in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalShard<T> {
    features: Vec<Vec<T>>,
    labels: Vec<T>,
}

impl<T: Scalar> LocalShard<T> {
    /// Builds a shard, checking shape and label validity.
    pub fn new(features: Vec<Vec<T>>, labels: Vec<T>) -> Result<Self, DataError> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(DataError::EmptyShard);
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(DataError::ZeroDimension);
        }
        for row in &features {
            if row.len() != dim {
                return Err(DataError::ZeroDimension);
            }
        }
        for &b in &labels {
            if !(b == T::one() || b == -T::one()) {
                return Err(DataError::BadLabel {
                    path: String::from("<memory>"),
                    row: 0,
                    value: 0.0,
                });
            }
        }
        Ok(LocalShard { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn feature(&self, index: usize) -> &[T] {
        &self.features[index]
    }

    pub fn label(&self, index: usize) -> T {
        self.labels[index]
    }

    /// Fraction of points labeled +1.
    pub fn positive_fraction(&self) -> T {
        let pos = self.labels.iter().filter(|&&b| b == T::one()).count();
        T::from_count(pos) / T::from_count(self.len())
    }
}

/// Indices of a sampled minibatch; distinct, within the shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
}

/// Draws `batch_size` distinct indices uniformly without replacement.
///
/// `batch_size` must be strictly smaller than the shard: the privacy
/// amplification argument needs genuine subsampling.
pub fn sample_minibatch<T: Scalar, R: Rng + ?Sized>(
    shard: &LocalShard<T>,
    batch_size: usize,
    stream: &mut R,
) -> Result<Minibatch, DataError> {
    let m = shard.len();
    if batch_size == 0 || batch_size >= m {
        return Err(DataError::InvalidBatchSize { batch_size, dataset_size: m });
    }
    let indices = rand::seq::index::sample(stream, m, batch_size).into_vec();
    Ok(Minibatch { indices })
}

/// Synthetic dataset for an experiment: training shards, matching held-out
/// test shards (20% extra points per agent), and the planted weight vector.
#[derive(Debug, Clone)]
pub struct SyntheticData<T> {
    pub train: Vec<LocalShard<T>>,
    pub test: Vec<LocalShard<T>>,
    pub ground_truth: Vec<T>,
}

/// Controls for [`generate`]. `heterogeneity` scales a per-agent feature mean
/// shift (0 keeps all agents iid).
#[derive(Debug, Clone)]
pub struct GenerateParams<T> {
    pub n_agents: usize,
    pub m_per_agent: usize,
    pub dim: usize,
    pub separation: T,
    pub heterogeneity: T,
    pub seed: u64,
}

/// Held-out points per agent, as a fraction of `m_per_agent`.
const TEST_FRACTION: f64 = 0.2;

/// Generates training shards only; see [`generate`] for the full split.
pub fn generate_synthetic<T: Scalar>(
    n_agents: usize,
    m_per_agent: usize,
    dim: usize,
    separation: T,
    seed: u64,
) -> Result<Vec<LocalShard<T>>, DataError> {
    let params = GenerateParams {
        n_agents,
        m_per_agent,
        dim,
        separation,
        heterogeneity: T::zero(),
        seed,
    };
    Ok(generate(&params)?.train)
}

/// Generates the full train/test split plus the planted `w*`.
///
/// Bitwise deterministic in `params.seed`; each agent draws from its own
/// derived stream, so the shard of agent `i` does not depend on `n_agents`.
pub fn generate<T: Scalar>(params: &GenerateParams<T>) -> Result<SyntheticData<T>, DataError> {
    if params.n_agents == 0 {
        return Err(DataError::ZeroAgents);
    }
    if params.m_per_agent == 0 {
        return Err(DataError::ZeroPoints);
    }
    if params.dim == 0 {
        return Err(DataError::ZeroDimension);
    }
    if params.separation < T::zero() || params.separation.is_nan() {
        return Err(DataError::NegativeSeparation);
    }

    // Ground truth comes from a stream of its own (agent slot n/a -> 0, step 0).
    let mut w_rng = derive_stream(params.seed, Purpose::DataGen, 0, 0, 1);
    let ground_truth = unit_sphere_vector::<T, _>(params.dim, &mut w_rng);

    let test_points = ((params.m_per_agent as f64) * TEST_FRACTION).ceil() as usize;
    let test_points = test_points.max(1);

    let mut train = Vec::with_capacity(params.n_agents);
    let mut test = Vec::with_capacity(params.n_agents);
    for agent in 0..params.n_agents {
        let mut rng = derive_stream(params.seed, Purpose::DataGen, agent, 0, 0);
        let mean_shift: Vec<T> = (0..params.dim)
            .map(|_| params.heterogeneity * T::standard_normal(&mut rng))
            .collect();
        train.push(draw_shard(
            params.m_per_agent,
            &ground_truth,
            &mean_shift,
            params.separation,
            &mut rng,
        )?);
        test.push(draw_shard(
            test_points,
            &ground_truth,
            &mean_shift,
            params.separation,
            &mut rng,
        )?);
    }
    Ok(SyntheticData { train, test, ground_truth })
}

/// Draws `count` labeled points against an alternating +1/-1 target sequence.
fn draw_shard<T: Scalar, R: Rng + ?Sized>(
    count: usize,
    ground_truth: &[T],
    mean_shift: &[T],
    separation: T,
    rng: &mut R,
) -> Result<LocalShard<T>, DataError> {
    const MAX_ATTEMPTS: usize = 100_000;
    let dim = ground_truth.len();
    let mut features = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for point in 0..count {
        let target = if point % 2 == 0 { T::one() } else { -T::one() };
        let mut accepted = false;
        for _ in 0..MAX_ATTEMPTS {
            let mut a: Vec<T> = (0..dim).map(|_| T::standard_normal(rng)).collect();
            for (x, &shift) in a.iter_mut().zip(mean_shift) {
                *x += shift;
            }
            let label = planted_label(&a, ground_truth, separation, rng);
            if label == target {
                features.push(a);
                labels.push(label);
                accepted = true;
                break;
            }
        }
        if !accepted {
            let target = if target == T::one() { 1i8 } else { -1i8 };
            return Err(DataError::BalanceUnreachable { target, attempts: MAX_ATTEMPTS });
        }
    }
    LocalShard::new(features, labels)
}

/// `sign(a . w* + eta / separation)`, with the exact limits at 0 and inf.
/// Sign convention: a zero score labels +1.
fn planted_label<T: Scalar, R: Rng + ?Sized>(
    a: &[T],
    ground_truth: &[T],
    separation: T,
    rng: &mut R,
) -> T {
    let margin = linalg::dot(a, ground_truth);
    // The noise draw happens unconditionally to keep the stream layout
    // identical across separation settings.
    let eta = T::standard_normal(rng);
    let score = if separation == T::zero() {
        eta
    } else if separation.is_infinite() {
        margin
    } else {
        margin + eta / separation
    };
    if score >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

fn unit_sphere_vector<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<T> {
    loop {
        let v: Vec<T> = (0..dim).map(|_| T::standard_normal(rng)).collect();
        let n = linalg::norm(&v);
        if n > T::cast(1e-12) {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Loads one agent's shard from a headerless CSV file with rows
/// `b,a_1,...,a_n` where `b` is +1 or -1. All rows must share one width.
pub fn load_csv<T: Scalar>(path: &std::path::Path) -> Result<LocalShard<T>, DataError> {
    let display = path.display().to_string();
    let io_err = |source| DataError::Io { path: display.clone(), source };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(source),
            other => DataError::RowParse {
                path: display.clone(),
                row: 0,
                message: format!("{other:?}"),
            },
        })?;

    let mut features: Vec<Vec<T>> = Vec::new();
    let mut labels: Vec<T> = Vec::new();
    let mut dim: Option<usize> = None;
    for (row_index, record) in reader.records().enumerate() {
        let row = row_index + 1;
        let record = record.map_err(|e| DataError::RowParse {
            path: display.clone(),
            row,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = record.iter().collect();
        let expected_dim = *dim.get_or_insert(fields.len().saturating_sub(1));
        if expected_dim == 0 || fields.len() != expected_dim + 1 {
            return Err(DataError::RowWidth {
                path: display.clone(),
                row,
                dim: expected_dim,
                got: fields.len(),
            });
        }
        let parse = |s: &str| -> Result<f64, DataError> {
            s.parse::<f64>().map_err(|e| DataError::RowParse {
                path: display.clone(),
                row,
                message: format!("{e}: {s:?}"),
            })
        };
        let label_raw = parse(fields[0])?;
        if label_raw != 1.0 && label_raw != -1.0 {
            return Err(DataError::BadLabel { path: display.clone(), row, value: label_raw });
        }
        labels.push(T::cast(label_raw));
        let mut a = Vec::with_capacity(expected_dim);
        for field in &fields[1..] {
            a.push(T::cast(parse(field)?));
        }
        features.push(a);
    }
    if features.is_empty() {
        return Err(DataError::EmptyShard);
    }
    LocalShard::new(features, labels)
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_params(separation: f64) -> GenerateParams<f64> {
        GenerateParams {
            n_agents: 4,
            m_per_agent: 200,
            dim: 5,
            separation,
            heterogeneity: 0.0,
            seed: 42,
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let a = generate(&reference_params(1.0)).unwrap();
        let b = generate(&reference_params(1.0)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.ground_truth, b.ground_truth);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&reference_params(1.0)).unwrap();
        let mut p = reference_params(1.0);
        p.seed = 43;
        let b = generate(&p).unwrap();
        assert_ne!(a.train[0], b.train[0]);
    }

    #[test]
    fn shard_shapes_and_balance() {
        let data = generate(&reference_params(1.0)).unwrap();
        assert_eq!(data.train.len(), 4);
        assert_eq!(data.test.len(), 4);
        for shard in &data.train {
            assert_eq!(shard.len(), 200);
            assert_eq!(shard.dim(), 5);
            let frac = shard.positive_fraction();
            assert!((frac - 0.5).abs() <= 0.05, "positive fraction {frac}");
        }
        for shard in &data.test {
            assert_eq!(shard.len(), 40);
        }
        let norm = linalg::norm(&data.ground_truth);
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minimal_generation_call() {
        let shards = generate_synthetic::<f64>(1, 2, 1, 0.0, 0).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].len(), 2);
        assert_eq!(shards[0].dim(), 1);
    }

    #[test]
    fn clean_labels_agree_with_ground_truth() {
        let mut p = reference_params(f64::INFINITY);
        p.m_per_agent = 500;
        let data = generate(&p).unwrap();
        for shard in data.train.iter().chain(data.test.iter()) {
            for idx in 0..shard.len() {
                let margin = linalg::dot(shard.feature(idx), &data.ground_truth);
                let expected = if margin >= 0.0 { 1.0 } else { -1.0 };
                assert_eq!(shard.label(idx), expected);
            }
        }
    }

    #[test]
    fn zero_separation_gives_feature_independent_labels() {
        // With separation 0 the planted margin is ignored; the alternating
        // target sequence still yields balance, and features of each class
        // should have near-zero mean margin.
        let mut p = reference_params(0.0);
        p.m_per_agent = 2000;
        p.n_agents = 1;
        let data = generate(&p).unwrap();
        let shard = &data.train[0];
        let mean_margin: f64 = (0..shard.len())
            .map(|i| shard.label(i) * linalg::dot(shard.feature(i), &data.ground_truth))
            .sum::<f64>()
            / shard.len() as f64;
        assert!(mean_margin.abs() < 0.1, "labels leaked the margin: {mean_margin}");
    }

    #[test]
    fn heterogeneity_shifts_per_agent_feature_means() {
        let mut p = reference_params(1.0);
        p.heterogeneity = 5.0;
        p.m_per_agent = 2000;
        p.n_agents = 2;
        let data = generate(&p).unwrap();
        let mean_of = |shard: &LocalShard<f64>| -> Vec<f64> {
            let mut m = vec![0.0; shard.dim()];
            for i in 0..shard.len() {
                linalg::add_scaled(&mut m, 1.0, shard.feature(i));
            }
            linalg::scale(&mut m, 1.0 / shard.len() as f64);
            m
        };
        let m0 = mean_of(&data.train[0]);
        let m1 = mean_of(&data.train[1]);
        let gap = linalg::norm(&linalg::sub(&m0, &m1));
        assert!(gap > 1.0, "expected distinct feature means, gap = {gap}");
    }

    #[test]
    fn invalid_generation_params_are_rejected() {
        assert!(matches!(
            generate_synthetic::<f64>(0, 10, 2, 1.0, 0),
            Err(DataError::ZeroAgents)
        ));
        assert!(matches!(
            generate_synthetic::<f64>(2, 0, 2, 1.0, 0),
            Err(DataError::ZeroPoints)
        ));
        assert!(matches!(
            generate_synthetic::<f64>(2, 10, 0, 1.0, 0),
            Err(DataError::ZeroDimension)
        ));
        assert!(matches!(
            generate_synthetic::<f64>(2, 10, 2, -1.0, 0),
            Err(DataError::NegativeSeparation)
        ));
    }

    #[test]
    fn minibatch_indices_are_distinct_and_in_range() {
        let shards = generate_synthetic::<f64>(1, 50, 3, 1.0, 7).unwrap();
        let mut rng = derive_stream(9, Purpose::Batch, 0, 0, 0);
        for _ in 0..100 {
            let batch = sample_minibatch(&shards[0], 8, &mut rng).unwrap();
            assert_eq!(batch.indices.len(), 8);
            let mut sorted = batch.indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 8);
            assert!(sorted.iter().all(|&i| i < 50));
        }
    }

    #[test]
    fn minibatch_rejects_degenerate_sizes() {
        let shards = generate_synthetic::<f64>(1, 10, 2, 1.0, 7).unwrap();
        let mut rng = derive_stream(9, Purpose::Batch, 0, 0, 0);
        assert!(matches!(
            sample_minibatch(&shards[0], 0, &mut rng),
            Err(DataError::InvalidBatchSize { .. })
        ));
        assert!(matches!(
            sample_minibatch(&shards[0], 10, &mut rng),
            Err(DataError::InvalidBatchSize { .. })
        ));
        assert!(matches!(
            sample_minibatch(&shards[0], 11, &mut rng),
            Err(DataError::InvalidBatchSize { .. })
        ));
    }

    #[test]
    fn minibatch_marginals_are_uniform() {
        // Each of 10 indices should appear in a size-3 batch with
        // probability 0.3. Frequencies over 1e5 draws land within 0.01.
        let shards = generate_synthetic::<f64>(1, 10, 2, 1.0, 3).unwrap();
        let mut rng = derive_stream(11, Purpose::Batch, 0, 0, 0);
        let draws = 100_000usize;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            for idx in sample_minibatch(&shards[0], 3, &mut rng).unwrap().indices {
                counts[idx] += 1;
            }
        }
        for (idx, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.3).abs() < 0.01, "index {idx} frequency {freq}");
        }
    }

    #[test]
    fn two_point_shard_sampling_is_fair() {
        let shards = generate_synthetic::<f64>(1, 2, 1, 1.0, 5).unwrap();
        let mut rng = derive_stream(13, Purpose::Batch, 0, 0, 0);
        let draws = 100_000usize;
        let mut first = 0usize;
        for _ in 0..draws {
            let batch = sample_minibatch(&shards[0], 1, &mut rng).unwrap();
            if batch.indices[0] == 0 {
                first += 1;
            }
        }
        let freq = first as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn csv_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("agent_0.csv");
        std::fs::write(&good, "1,0.5,-2.0\n-1,1.25,3.5\n").unwrap();
        let shard: LocalShard<f64> = load_csv(&good).unwrap();
        assert_eq!(shard.len(), 2);
        assert_eq!(shard.dim(), 2);
        assert_eq!(shard.label(0), 1.0);
        assert_eq!(shard.feature(1), &[1.25, 3.5]);

        let bad_label = dir.path().join("bad_label.csv");
        std::fs::write(&bad_label, "2,0.5\n").unwrap();
        assert!(matches!(
            load_csv::<f64>(&bad_label),
            Err(DataError::BadLabel { row: 1, .. })
        ));

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "1,0.5,1.0\n-1,2.0\n").unwrap();
        assert!(matches!(
            load_csv::<f64>(&ragged),
            Err(DataError::RowWidth { row: 2, .. })
        ));

        let unparsable = dir.path().join("unparsable.csv");
        std::fs::write(&unparsable, "1,abc\n").unwrap();
        assert!(matches!(
            load_csv::<f64>(&unparsable),
            Err(DataError::RowParse { row: 1, .. })
        ));

        assert!(matches!(
            load_csv::<f64>(&dir.path().join("missing.csv")),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn generation_works_at_f32() {
        let shards = generate_synthetic::<f32>(2, 20, 3, 1.0f32, 1).unwrap();
        assert_eq!(shards[0].dim(), 3);
        assert!(shards[0].labels.iter().all(|&b| b == 1.0f32 || b == -1.0f32));
    }
}
