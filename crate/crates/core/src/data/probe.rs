use nalgebra::{DMatrix, DVector};

use super::{neighbor_means, DatasetBundle};
use crate::train::{evaluate_auc, TrainError};
use crate::Scalar;

/// Feature sets a linear probe may look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeInputs {
    /// Mean features of out-neighbors.
    Out,
    /// A node's own features concatenated with its in-neighbor mean.
    SelfIn,
}

const RIDGE: f64 = 1e-3;

/// Test AUC of a ridge regression of the label on `inputs`, fitted on the
/// train and validation nodes.
pub fn probe_auc<S: Scalar>(bundle: &DatasetBundle<S>, inputs: ProbeInputs) -> Result<f64, TrainError> {
    let n = bundle.num_nodes();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|i| bundle.features.row(i).iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let design: Vec<Vec<f64>> = match inputs {
        ProbeInputs::Out => neighbor_means(&bundle.graph, &x, true),
        ProbeInputs::SelfIn => {
            let ins = neighbor_means(&bundle.graph, &x, false);
            x.iter().zip(ins).map(|(a, b)| a.iter().copied().chain(b).collect()).collect()
        }
    };
    let cols = design.first().map_or(0, Vec::len) + 1;
    let fit_nodes: Vec<usize> = bundle.split.train.iter().chain(&bundle.split.val).copied().collect();
    let row = |i: usize| std::iter::once(1.0).chain(design[i].iter().copied());

    let a = DMatrix::from_row_iterator(fit_nodes.len(), cols, fit_nodes.iter().flat_map(|&i| row(i)));
    let y = DVector::from_iterator(
        fit_nodes.len(),
        fit_nodes.iter().map(|&i| bundle.labels[i].map_or(0.0, |c| c as f64)),
    );
    let mut gram = a.transpose() * &a;
    for k in 1..cols {
        gram[(k, k)] += RIDGE * fit_nodes.len() as f64;
    }
    let rhs = a.transpose() * y;
    let w = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(cols));

    let test = &bundle.split.test;
    let scores: Vec<f64> = test.iter().map(|&i| row(i).zip(w.iter()).map(|(a, b)| a * b).sum()).collect();
    let labels: Vec<usize> = test.iter().map(|&i| bundle.labels[i].unwrap_or(0)).collect();
    evaluate_auc(&scores, &labels)
}
