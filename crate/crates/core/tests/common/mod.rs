#![allow(dead_code)]

use dkf_core::graph::Topology;
use dkf_core::matkit::{self, Matrix, Vector};
use dkf_core::model::{NominalModel, Sensor, TrueSystem};
use proptest::prelude::*;

pub fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

pub fn square(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max).prop_flat_map(|n| mat(n, n))
}

/// Shifted so that every eigenvalue has real part at most `-margin`.
pub fn stabilize(m: &Matrix, margin: f64) -> Matrix {
    let alpha = matkit::spectral_abscissa(m).unwrap();
    m - Matrix::identity(m.nrows(), m.ncols()) * (alpha + margin)
}

pub fn spd(m: &Matrix, floor: f64) -> Matrix {
    matkit::symmetrize(&(m.transpose() * m)) + Matrix::identity(m.ncols(), m.ncols()) * floor
}

/// Connected graph: a random spanning tree plus extra edges from a bitmask.
pub fn connected_graph(max_nodes: usize) -> impl Strategy<Value = Topology> {
    (2..=max_nodes).prop_flat_map(|n| {
        let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
        (parents, any::<u64>()).prop_map(move |(parents, mask)| {
            let mut edges: Vec<(usize, usize)> = parents.iter().enumerate().map(|(i, &p)| (i + 1, p)).collect();
            let mut bit = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    if mask >> (bit % 64) & 1 == 1 {
                        edges.push((i, j));
                    }
                    bit += 1;
                }
            }
            Topology::from_edges(n, &dedup(edges)).unwrap()
        })
    })
}

fn dedup(edges: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = edges.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// A small estimation problem: state matrix, one scalar sensor per node.
#[derive(Debug, Clone)]
pub struct Problem {
    pub ts: TrueSystem,
    pub topology: Topology,
}

pub fn problem(max_n: usize, max_nodes: usize, stable: bool) -> impl Strategy<Value = Problem> {
    (1..=max_n, connected_graph(max_nodes)).prop_flat_map(move |(n, topology)| {
        let n_s = topology.node_count();
        (mat(n, n), mat(n_s, n), prop::collection::vec(0.1f64..1.0, n_s), mat(n, n), mat(n, n)).prop_map(
            move |(a, c, r, q, s0)| {
                let a = if stable { stabilize(&a, 0.2) } else { a };
                let sensors = (0..n_s)
                    .map(|i| Sensor::new(c.rows(i, 1).into_owned(), Matrix::from_element(1, 1, r[i])))
                    .collect();
                let ts = TrueSystem::new(a, spd(&q, 0.05), sensors, Vector::from_element(n, 0.5), spd(&s0, 0.1) * 0.2)
                    .unwrap();
                Problem { ts, topology: topology.clone() }
            },
        )
    })
}

/// Perturb only the noise intensities by PSD amounts scaled with `sign`.
pub fn noise_mismatch(ts: &TrueSystem, dq: &Matrix, dr: &[f64], sign: f64) -> NominalModel {
    let mut nm = NominalModel::exact(ts);
    nm.q = &nm.q + matkit::symmetrize(&(dq.transpose() * dq)) * sign * 0.1;
    for (s, d) in nm.sensors.iter_mut().zip(dr) {
        s.r[(0, 0)] = (s.r[(0, 0)] + sign * d * 0.05).max(0.05);
    }
    nm
}

pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// `X` solving `A X + X B = C` by the dense Kronecker system.
pub fn kron_sylvester(a: &Matrix, b: &Matrix, c: &Matrix) -> Matrix {
    let (m, n) = (a.nrows(), b.nrows());
    let big = matkit::kron(&Matrix::identity(n, n), a) + matkit::kron(&b.transpose(), &Matrix::identity(m, m));
    let rhs = Vector::from_column_slice(c.as_slice());
    let x = big.lu().solve(&rhs).expect("oracle system is nonsingular");
    Matrix::from_column_slice(m, n, x.as_slice())
}
