use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{DataError, DatasetBundle};
use crate::autodiff::Matrix;
use crate::graph::DirectedGraph;
use crate::train::Split;
use crate::Scalar;

/// Which neighbors carry the planted label signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SignalDirection {
    Out,
    In,
    Both,
}

impl SignalDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            SignalDirection::Out => "out",
            SignalDirection::In => "in",
            SignalDirection::Both => "both",
        }
    }
}

impl fmt::Display for SignalDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignalDirection {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "out" => Ok(SignalDirection::Out),
            "in" => Ok(SignalDirection::In),
            "both" => Ok(SignalDirection::Both),
            other => Err(DataError::Config(format!("unknown signal direction `{other}` (out, in, both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_nodes: usize,
    pub avg_out_degree: f64,
    pub feature_dim: usize,
    pub signal_direction: SignalDirection,
    /// Standard deviation of the noise added to every observed feature.
    pub noise_std: f64,
    pub positive_rate: f64,
    /// Probability that a sampled edge `i -> j` also gets `j -> i`.
    pub reciprocity: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_nodes: 5000,
            avg_out_degree: 3.0,
            feature_dim: 16,
            signal_direction: SignalDirection::Out,
            noise_std: 0.1,
            positive_rate: 0.25,
            reciprocity: 0.0,
            train_frac: 0.6,
            val_frac: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::Config(m.to_string()));
        if self.num_nodes < 2 {
            return fail("num_nodes must be at least 2");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be at least 1");
        }
        if !(self.avg_out_degree > 0.0 && self.avg_out_degree.is_finite()) {
            return fail("avg_out_degree must be positive");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return fail("positive_rate must lie strictly between 0 and 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.reciprocity) {
            return fail("reciprocity must lie in [0, 1]");
        }
        if !(self.train_frac > 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac <= 1.0) {
            return fail("split fractions must be positive and sum to at most 1");
        }
        Ok(())
    }
}

/// Row `i` is the mean of `x` over `i`'s out-neighbors (`out = true`) or
/// in-neighbors, zero when there are none. Self-loops are ignored.
pub fn neighbor_means(graph: &DirectedGraph, x: &[Vec<f64>], out: bool) -> Vec<Vec<f64>> {
    let d = x.first().map_or(0, Vec::len);
    (0..graph.num_nodes())
        .map(|i| {
            let mut acc = vec![0.0; d];
            let mut k = 0usize;
            let nbrs: Vec<usize> = if out {
                graph.out_neighbors(i).map(|(j, _)| j).collect()
            } else {
                graph.in_neighbors(i).map(|(j, _)| j).collect()
            };
            for j in nbrs.into_iter().filter(|&j| j != i) {
                k += 1;
                for (a, v) in acc.iter_mut().zip(&x[j]) {
                    *a += v;
                }
            }
            if k > 0 {
                acc.iter_mut().for_each(|a| *a /= k as f64);
            }
            acc
        })
        .collect()
}

/// Random directed graph with a label planted in neighbor features.
///
/// Every node draws a Poisson out-degree and distinct uniform targets. A
/// latent feature matrix `z` is standard normal, a probe direction `p` is a
/// random unit vector, and each node is scored by `p · mean(z)` over its
/// out-neighbors, in-neighbors, or the sum of both. The top `positive_rate`
/// fraction of scores is labeled 1. Observed features are
/// `z + noise_std * N(0, 1)`, so a node's own features carry no information
/// about its label.
pub fn generate_synthetic<S: Scalar>(cfg: &SyntheticConfig) -> Result<DatasetBundle<S>, DataError> {
    cfg.validate()?;
    let n = cfg.num_nodes;
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let poisson = Poisson::new(cfg.avg_out_degree).map_err(|e| DataError::Config(e.to_string()))?;
    let mut edges = Vec::new();
    for i in 0..n {
        let k = (poisson.sample(&mut rng) as usize).min(n - 1);
        let mut targets: Vec<usize> = sample(&mut rng, n - 1, k)
            .into_iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .collect();
        targets.sort_unstable();
        edges.extend(targets.into_iter().map(|j| (i, j)));
    }
    if cfg.reciprocity > 0.0 {
        let base = DirectedGraph::new(n, edges.clone())?;
        let mut extra = Vec::new();
        for &(s, t) in base.edges() {
            if rng.random::<f64>() < cfg.reciprocity && !base.has_edge(t, s) {
                extra.push((t, s));
            }
        }
        extra.sort_unstable();
        extra.dedup();
        edges.extend(extra);
    }
    let graph = DirectedGraph::new(n, edges)?;

    let z: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut probe: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = probe.iter().map(|v| v * v).sum::<f64>().sqrt();
    probe.iter_mut().for_each(|v| *v /= norm);

    let project = |rows: &[Vec<f64>]| -> Vec<f64> {
        rows.iter()
            .map(|r| r.iter().zip(&probe).map(|(a, b)| a * b).sum())
            .collect()
    };
    let score: Vec<f64> = match cfg.signal_direction {
        SignalDirection::Out => project(&neighbor_means(&graph, &z, true)),
        SignalDirection::In => project(&neighbor_means(&graph, &z, false)),
        SignalDirection::Both => {
            let a = project(&neighbor_means(&graph, &z, true));
            let b = project(&neighbor_means(&graph, &z, false));
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }
    };
    let num_pos = ((cfg.positive_rate * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut labels = vec![Some(0); n];
    for &i in &order[..num_pos] {
        labels[i] = Some(1);
    }

    let mut features = Matrix::zeros(n, d);
    for (i, zi) in z.iter().enumerate() {
        for (k, &v) in zi.iter().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            features.set(i, k, S::of(v + cfg.noise_std * eps));
        }
    }

    let split = Split::stratified(&labels, cfg.train_frac, cfg.val_frac, cfg.seed)?;
    Ok(DatasetBundle {
        name: format!("synthetic-{}-n{}-s{}", cfg.signal_direction, n, cfg.seed),
        graph,
        features,
        labels,
        split,
    })
}
