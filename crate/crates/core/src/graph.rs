//! Undirected, unweighted sensor-network topologies and their Laplacians.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matkit::{self, Matrix, Vector};

/// Relative cut for the algebraic connectivity: `λ_{N-1} > 1e-9·λ₁`.
pub const CONNECTIVITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    adjacency: Vec<Vec<u8>>,
}

impl Topology {
    /// Build from an explicit 0/1 adjacency matrix.
    pub fn from_adjacency(adjacency: Vec<Vec<u8>>) -> Result<Self> {
        let n = adjacency.len();
        if n == 0 {
            return Err(Error::InvalidConfig("topology needs at least one node".into()));
        }
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "adjacency row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row[i] != 0 {
                return Err(Error::InvalidConfig(format!("adjacency has a self loop at node {i}")));
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(Error::InvalidConfig(format!("adjacency entry ({i},{j}) is not 0/1")));
                }
                if adjacency[j][i] != v {
                    return Err(Error::InvalidConfig(format!("adjacency is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { adjacency })
    }

    /// Build from an undirected edge list over nodes `0..nodes`.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![vec![0u8; nodes]; nodes];
        for &(i, j) in edges {
            if i >= nodes || j >= nodes {
                return Err(Error::InvalidConfig(format!("edge ({i},{j}) references a node >= {nodes}")));
            }
            if i == j {
                return Err(Error::InvalidConfig(format!("edge ({i},{i}) is a self loop")));
            }
            adjacency[i][j] = 1;
            adjacency[j][i] = 1;
        }
        Self::from_adjacency(adjacency)
    }

    pub fn ring(nodes: usize) -> Self {
        let edges: Vec<_> = match nodes {
            0 | 1 => Vec::new(),
            2 => vec![(0, 1)],
            _ => (0..nodes).map(|i| (i, (i + 1) % nodes)).collect(),
        };
        Self::from_edges(nodes.max(1), &edges).expect("ring is well formed")
    }

    pub fn complete(nodes: usize) -> Self {
        let edges: Vec<_> = (0..nodes)
            .flat_map(|i| ((i + 1)..nodes).map(move |j| (i, j)))
            .collect();
        Self::from_edges(nodes.max(1), &edges).expect("complete graph is well formed")
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn adjacency(&self) -> &[Vec<u8>] {
        &self.adjacency
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.adjacency[i]
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| (v == 1).then_some(j))
            .collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.node_count();
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[i][j] == 1)
            .collect()
    }
}

/// Laplacian eigenvalues (decreasing) and an orthonormal `T̄` with
/// `T̄ 𝓛 T̄ᵀ = diag{0, λ_{N-1}, …, λ_1}`.
#[derive(Debug, Clone)]
pub struct LaplacianSpectrum {
    pub eigenvalues: Vector,
    pub transform: Matrix,
}

impl LaplacianSpectrum {
    /// `λ_{N-1}(𝓛)`, the second-smallest eigenvalue.
    pub fn algebraic_connectivity(&self) -> f64 {
        let n = self.eigenvalues.len();
        if n < 2 {
            return 0.0;
        }
        self.eigenvalues[n - 2]
    }

    pub fn largest(&self) -> f64 {
        self.eigenvalues[0]
    }
}

/// `𝓛 = D − S`.
pub fn laplacian(t: &Topology) -> Matrix {
    let n = t.node_count();
    Matrix::from_fn(n, n, |i, j| {
        if i == j {
            t.adjacency[i].iter().map(|&v| v as f64).sum()
        } else {
            -(t.adjacency[i][j] as f64)
        }
    })
}

/// Breadth-first connectivity check.
pub fn is_connected(t: &Topology) -> bool {
    let n = t.node_count();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for j in t.neighbors(i) {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == n
}

/// Spectral connectivity test, `λ_{N-1} > CONNECTIVITY_TOL·λ₁`.
pub fn is_connected_spectral(t: &Topology) -> Result<bool> {
    let n = t.node_count();
    if n == 1 {
        return Ok(true);
    }
    let ev = matkit::sym_eigenvalues(&laplacian(t))?;
    Ok(ev[n - 2] > CONNECTIVITY_TOL * ev[0])
}

pub fn laplacian_spectrum(t: &Topology) -> Result<LaplacianSpectrum> {
    if !is_connected(t) {
        return Err(Error::Disconnected);
    }
    let n = t.node_count();
    let (values, vectors) = matkit::sym_eigen(&laplacian(t))?;
    // Rows of T̄ in ascending eigenvalue order so the zero mode comes first;
    // the zero mode is pinned to 1ᵀ/√N exactly.
    let mut transform = Matrix::zeros(n, n);
    let inv_sqrt = 1.0 / (n as f64).sqrt();
    transform.row_mut(0).fill(inv_sqrt);
    for k in 1..n {
        let mut v = vectors.column(n - 1 - k).into_owned();
        let shift = v.sum() / n as f64;
        v.add_scalar_mut(-shift);
        for prev in 0..k {
            let row = transform.row(prev).transpose();
            let d = row.dot(&v);
            v -= row * d;
        }
        v /= v.norm();
        transform.set_row(k, &v.transpose());
    }
    let mut eigenvalues = values;
    eigenvalues[n - 1] = 0.0;
    Ok(LaplacianSpectrum { eigenvalues, transform })
}
