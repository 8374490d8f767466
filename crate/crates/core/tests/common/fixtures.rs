//! Hand-built graphs for the explainer and bias statistics.

use dgat_core::autodiff::Matrix;
use dgat_core::graph::DirectedGraph;
use rand::Rng;

use super::rng;

/// Six nodes around center 0:
/// `0<->1`, `1<->2`, `1<->3`, `0->3`, `3->4` and a loop on the isolated node 5.
pub fn bias_fixture() -> DirectedGraph {
    DirectedGraph::new(
        6,
        vec![(0, 1), (1, 0), (1, 2), (2, 1), (1, 3), (3, 1), (0, 3), (3, 4), (5, 5)],
    )
    .unwrap()
}

/// Disjoint motifs. In each, a target receives one informative edge from a
/// node with features `[s, 0]` and two edges from distractors with zero
/// features; the target's own features are zero too and its label is
/// `s > 0`.
pub struct InformativeFixture {
    pub graph: DirectedGraph,
    pub features: Matrix<f64>,
    pub labels: Vec<Option<usize>>,
    pub targets: Vec<usize>,
    /// Edge id of each target's informative edge.
    pub informative: Vec<usize>,
}

pub fn informative_fixture(motifs: usize, seed: u64) -> InformativeFixture {
    let mut rng = rng(seed);
    let n = motifs * 4;
    let mut edges = Vec::new();
    let mut features = Matrix::zeros(n, 2);
    let mut labels = vec![None; n];
    let (mut targets, mut informative) = (Vec::new(), Vec::new());
    for m in 0..motifs {
        let (t, i) = (4 * m, 4 * m + 1);
        let s = if m % 2 == 0 { 1.0 } else { -1.0 } * rng.random_range(0.5..1.5);
        features.set(i, 0, s);
        informative.push(edges.len());
        edges.push((i, t));
        edges.push((4 * m + 2, t));
        edges.push((4 * m + 3, t));
        labels[t] = Some(usize::from(s > 0.0));
        targets.push(t);
    }
    InformativeFixture {
        graph: DirectedGraph::new(n, edges).unwrap(),
        features,
        labels,
        targets,
        informative,
    }
}
