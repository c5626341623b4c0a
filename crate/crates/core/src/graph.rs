//! Communication topologies and their Laplacian spectra.
//!
//! The solver's step-size conditions depend on two spectral quantities of the
//! graph Laplacian `L = D - A`: the smallest nonzero eigenvalue `lambda_min_nonzero`
//! and the largest eigenvalue `lambda_max`. Graphs here are undirected, simple,
//! and must be connected; at desk scale (tens to low hundreds of agents) a
//! dense symmetric eigensolver is exact enough and keeps dependencies local.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("need at least {min} agents, got {got}")]
    TooFewAgents { min: usize, got: usize },
    #[error("edge ({i}, {j}) has an endpoint outside 0..{n_agents}")]
    EdgeOutOfRange { i: usize, j: usize, n_agents: usize },
    #[error("self-loop at agent {agent}")]
    SelfLoop { agent: usize },
    #[error("duplicate edge ({i}, {j})")]
    DuplicateEdge { i: usize, j: usize },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("spectrum has {zero_count} near-zero eigenvalues; connected graphs have exactly one")]
    ConnectivityViolation { zero_count: usize },
}

/// An undirected, connected communication graph over agents `0..n_agents`.
///
/// Edges are stored once as `(i, j)` with `i < j`; neighbor lists are sorted
/// so that iteration order is deterministic everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n_agents: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a validated topology from an explicit edge list.
    pub fn from_edge_list(n_agents: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n_agents < 2 {
            return Err(GraphError::TooFewAgents { min: 2, got: n_agents });
        }
        let mut normalized: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n_agents || b >= n_agents {
                return Err(GraphError::EdgeOutOfRange { i: a, j: b, n_agents });
            }
            if a == b {
                return Err(GraphError::SelfLoop { agent: a });
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        for w in normalized.windows(2) {
            if w[0] == w[1] {
                return Err(GraphError::DuplicateEdge { i: w[0].0, j: w[0].1 });
            }
        }

        let mut neighbors = vec![Vec::new(); n_agents];
        for &(i, j) in &normalized {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        let topology = Topology { n_agents, edges: normalized, neighbors };
        if !topology.is_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(topology)
    }

    /// Ring over `n` agents: agent `i` talks to `(i + 1) mod n` and `(i - 1) mod n`.
    pub fn ring(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Err(GraphError::TooFewAgents { min: 3, got: n });
        }
        let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::from_edge_list(n, &edges)
    }

    /// Complete graph over `n` agents.
    pub fn complete(n: usize) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::TooFewAgents { min: 2, got: n });
        }
        let mut edges = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j));
            }
        }
        Self::from_edge_list(n, &edges)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Undirected edges as `(i, j)` pairs with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted neighbor list of `agent`.
    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    pub fn degree(&self, agent: usize) -> usize {
        self.neighbors[agent].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_agents];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &self.neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == self.n_agents
    }

    /// Dense Laplacian `L = D - A` as rows.
    pub fn laplacian<T: Scalar>(&self) -> Vec<Vec<T>> {
        let n = self.n_agents;
        let mut l = vec![vec![T::zero(); n]; n];
        for (i, row) in l.iter_mut().enumerate() {
            row[i] = T::from_count(self.degree(i));
        }
        for &(i, j) in &self.edges {
            l[i][j] = -T::one();
            l[j][i] = -T::one();
        }
        l
    }
}

/// Spectral summary of a topology's Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralInfo<T> {
    /// Smallest nonzero Laplacian eigenvalue (algebraic connectivity).
    pub lambda_min_nonzero: T,
    /// Largest Laplacian eigenvalue.
    pub lambda_max: T,
    pub degrees: Vec<usize>,
    pub max_degree: usize,
}

/// Relative threshold below which an eigenvalue counts as zero.
const ZERO_EIGENVALUE_REL: f64 = 1e-9;

/// Computes the Laplacian spectrum summary of a connected topology.
///
/// Exactly one eigenvalue may fall below `1e-9 * lambda_max` in magnitude (the
/// trivial zero of a connected graph); more than one is reported as a
/// connectivity violation rather than silently returning a near-zero
/// `lambda_min_nonzero`.
pub fn spectral_info<T: Scalar>(topology: &Topology) -> Result<SpectralInfo<T>, GraphError> {
    let mut eigenvalues = symmetric_eigenvalues(topology.laplacian::<T>());
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
    let lambda_max = *eigenvalues.last().expect("n_agents >= 2");
    // 1e-9 relative, floored at what the scalar type can actually resolve
    // (matters for f32, where the solver noise floor sits near 1e-6).
    let relative = T::cast(ZERO_EIGENVALUE_REL).max(T::epsilon() * T::cast(64.0));
    let threshold = relative * lambda_max;

    let zero_count = eigenvalues.iter().filter(|&&v| v.abs() < threshold).count();
    if zero_count != 1 {
        return Err(GraphError::ConnectivityViolation { zero_count });
    }
    let lambda_min_nonzero = *eigenvalues
        .iter()
        .find(|&&v| v.abs() >= threshold)
        .expect("n_agents >= 2 gives a nonzero eigenvalue");

    let degrees = topology.degrees();
    let max_degree = *degrees.iter().max().expect("non-empty");
    Ok(SpectralInfo { lambda_min_nonzero, lambda_max, degrees, max_degree })
}

/// Largest admissible dual step: `beta` must stay strictly below
/// `2 / (tau * lambda_max * rho)`.
pub fn beta_bound<T: Scalar>(spectrum: &SpectralInfo<T>, tau: usize, rho: T) -> T {
    T::cast(2.0) / (T::from_count(tau) * spectrum.lambda_max * rho)
}

/// Eigenvalues of a dense symmetric matrix by cyclic Jacobi sweeps.
///
/// Jacobi is slow past a few thousand rows but is simple, backward stable,
/// and accurate to machine precision, which is what the step-size checks
/// need. Matrix is consumed as a row-major `Vec<Vec<T>>`.
fn symmetric_eigenvalues<T: Scalar>(mut a: Vec<Vec<T>>) -> Vec<T> {
    let n = a.len();
    if n == 1 {
        return vec![a[0][0]];
    }
    let frobenius: T = a
        .iter()
        .flat_map(|row| row.iter())
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt();
    let tolerance = T::epsilon() * frobenius.max(T::one());

    const MAX_SWEEPS: usize = 64;
    for _ in 0..MAX_SWEEPS {
        let off_diag: T = {
            let mut s = T::zero();
            for (p, row) in a.iter().enumerate() {
                for &v in &row[p + 1..] {
                    s += v * v;
                }
            }
            s.sqrt()
        };
        if off_diag <= tolerance {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq.abs() <= tolerance * T::cast(1e-3) {
                    continue;
                }
                // Classical 2x2 Jacobi rotation annihilating a[p][q].
                let theta = (a[q][q] - a[p][p]) / (T::cast(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (T::one() + theta * theta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;

                for row in a.iter_mut() {
                    let akp = row[p];
                    let akq = row[q];
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                // Rows p and q update together; split borrows would obscure it.
                #[allow(clippy::needless_range_loop)]
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

// ============================================================================
// Tests
// ============================================================================
