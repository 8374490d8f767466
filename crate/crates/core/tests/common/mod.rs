//! Helpers shared by the integration tests (and pulled into the CLI
//! acceptance suite by path).

#![allow(dead_code)]

pub mod fixtures;
pub mod oracle;

use std::collections::BTreeSet;

use dgat_core::autodiff::Matrix;
use dgat_core::graph::DirectedGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Erdos-Renyi style directed graph, no self-loops, each ordered pair kept
/// with probability `p`.
pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> DirectedGraph {
    let mut edges = Vec::new();
    for s in 0..n {
        for d in 0..n {
            if s != d && rng.random::<f64>() < p {
                edges.push((s, d));
            }
        }
    }
    DirectedGraph::new(n, edges).unwrap()
}

/// Like [`random_graph`] but also sprinkles in a few self-loops.
pub fn random_graph_with_loops(rng: &mut impl Rng, n: usize, p: f64) -> DirectedGraph {
    let mut edges: Vec<_> = random_graph(rng, n, p).edges().to_vec();
    for i in 0..n {
        if rng.random::<f64>() < 0.2 {
            edges.push((i, i));
        }
    }
    DirectedGraph::new(n, edges).unwrap()
}

/// Every sampled edge is inserted in both directions.
pub fn reciprocated_graph(rng: &mut impl Rng, n: usize, p: f64) -> DirectedGraph {
    let mut pairs = BTreeSet::new();
    for s in 0..n {
        for d in (s + 1)..n {
            if rng.random::<f64>() < p {
                pairs.insert((s, d));
                pairs.insert((d, s));
            }
        }
    }
    DirectedGraph::new(n, pairs.into_iter().collect()).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &Matrix<f64>) -> f64 {
    assert_eq!((a.len(), a.first().map_or(b.cols(), Vec::len)), b.shape());
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}
