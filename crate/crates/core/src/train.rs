//! Full-batch training with Adam, ROC AUC, and early stopping on
//! validation AUC.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Index, Matrix, ParamStore, Tape};
use crate::layers::{init_params, LayerError, Model, ModelConfig, Propagation};
use crate::{Precision, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrain,
    #[error("{0} labels contain a single class; AUC is undefined")]
    SingleClass(&'static str),
    #[error("{what}: expected {expected} entries, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("node {0} is in a split but has no label")]
    Unlabeled(usize),
    #[error("node {node} appears in both {first} and {second}")]
    Overlap {
        node: usize,
        first: &'static str,
        second: &'static str,
    },
    #[error("node {node} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Layer(LayerError::Autodiff(e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without improvement before stopping; 0 never stops early.
    pub patience: usize,
    /// Per-class loss weights; `None` means `n_train / (C * n_c)`.
    pub class_weights: Option<Vec<f64>>,
    /// Seeds parameter initialization.
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            max_epochs: 300,
            patience: 30,
            class_weights: None,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("weight_decay must be non-negative".into()));
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(TrainError::Config("class weights must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Disjoint train/validation/test node sets, each sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Sorts each set and checks the sets are pairwise disjoint.
    pub fn new(mut train: Vec<usize>, mut val: Vec<usize>, mut test: Vec<usize>) -> Result<Self, TrainError> {
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        let mut seen: std::collections::BTreeMap<usize, &'static str> = Default::default();
        for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
            let mut prev = None;
            for &node in set.iter() {
                if let Some(first) = seen.insert(node, name) {
                    return Err(TrainError::Overlap {
                        node,
                        first,
                        second: name,
                    });
                }
                if prev == Some(node) {
                    return Err(TrainError::Overlap {
                        node,
                        first: name,
                        second: name,
                    });
                }
                prev = Some(node);
            }
        }
        Ok(Self { train, val, test })
    }

    /// Per-class shuffled split of the labeled nodes: the first
    /// `round(train_frac * n_c)` of each class go to train, the next
    /// `round(val_frac * n_c)` to validation, the rest to test.
    pub fn stratified(labels: &[Option<usize>], train_frac: f64, val_frac: f64, seed: u64) -> Result<Self, TrainError> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
            return Err(TrainError::Config(format!("bad split fractions {train_frac}/{val_frac}")));
        }
        let classes: BTreeSet<usize> = labels.iter().flatten().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for c in classes {
            let mut nodes: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(c)).collect();
            nodes.shuffle(&mut rng);
            let n = nodes.len() as f64;
            let n_train = (train_frac * n).round() as usize;
            let n_val = ((val_frac * n).round() as usize).min(nodes.len() - n_train);
            train.extend_from_slice(&nodes[..n_train]);
            val.extend_from_slice(&nodes[n_train..n_train + n_val]);
            test.extend_from_slice(&nodes[n_train + n_val..]);
        }
        Self::new(train, val, test)
    }

    /// Checks ranges and that every split node is labeled.
    pub fn validate(&self, labels: &[Option<usize>]) -> Result<(), TrainError> {
        for &node in self.train.iter().chain(&self.val).chain(&self.test) {
            match labels.get(node) {
                None => {
                    return Err(TrainError::NodeOutOfRange {
                        node,
                        num_nodes: labels.len(),
                    })
                }
                Some(None) => return Err(TrainError::Unlabeled(node)),
                Some(Some(_)) => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub epoch: usize,
    pub loss: f64,
    pub auc: f64,
}

/// One row of the training curve, describing the parameters after `epoch`
/// optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation set lacks one of the classes.
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar> {
    /// Parameters from the selected epoch.
    pub params: ParamStore<S>,
    /// The model configuration with `seed` set to the run seed.
    pub model_config: ModelConfig,
    pub history: Vec<EpochMetrics>,
    pub best: EpochMetrics,
}

/// Area under the ROC curve of `scores` for the positive class `1`.
/// Tied scores share their average rank, so a positive tied with a negative
/// counts one half.
pub fn evaluate_auc(scores: &[f64], labels: &[usize]) -> Result<f64, TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::Length {
            what: "labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(TrainError::NonFiniteScore(bad));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::SingleClass("evaluation"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean.
        let avg = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        pos_rank_sum += avg * pos_in_group as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// One Adam update with decoupled weight decay, using the gradients in
/// `params`. The step counter in `params` is incremented.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, cfg: &TrainConfig) {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let t = params.steps() + 1;
    let (b1, b2) = (S::of(BETA1), S::of(BETA2));
    let bc1 = S::of(1.0 - BETA1.powi(t as i32));
    let bc2 = S::of(1.0 - BETA2.powi(t as i32));
    let lr = S::of(cfg.learning_rate);
    let decay = S::of(cfg.learning_rate * cfg.weight_decay);
    let eps = S::of(EPS);
    for p in params.params_mut() {
        let n = p.value.len();
        let value = p.value.as_mut_slice();
        let grad = p.grad.as_slice();
        let m = p.first_moment.as_mut_slice();
        let v = p.second_moment.as_mut_slice();
        for k in 0..n {
            value[k] -= decay * value[k];
            m[k] = b1 * m[k] + (S::one() - b1) * grad[k];
            v[k] = b2 * v[k] + (S::one() - b2) * grad[k] * grad[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            value[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.set_steps(t);
}

/// `n / (C * n_c)` over `nodes`, zero for classes absent from `nodes`.
pub fn inverse_frequency_weights(labels: &[Option<usize>], nodes: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &i in nodes {
        if let Some(Some(c)) = labels.get(i) {
            if *c < num_classes {
                counts[*c] += 1;
            }
        }
    }
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                nodes.len() as f64 / (num_classes as f64 * c as f64)
            }
        })
        .collect()
}

fn labels_of(labels: &[Option<usize>], nodes: &[usize]) -> Result<Vec<usize>, TrainError> {
    nodes
        .iter()
        .map(|&i| match labels.get(i) {
            Some(Some(y)) => Ok(*y),
            Some(None) => Err(TrainError::Unlabeled(i)),
            None => Err(TrainError::NodeOutOfRange {
                node: i,
                num_nodes: labels.len(),
            }),
        })
        .collect()
}

/// Log-probability of class 1 per node, from raw logits. Ranking by it
/// equals ranking by the probability, without saturating at 1.
pub fn positive_scores<S: Scalar>(logits: &Matrix<S>, nodes: &[usize]) -> Vec<f64> {
    nodes
        .iter()
        .map(|&i| {
            let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row[1] - lse
        })
        .collect()
}

/// Loss and AUC on `nodes` under frozen parameters. The loss uses unit
/// class weights.
pub fn evaluate<S: Scalar>(
    model: &Model,
    params: &ParamStore<S>,
    prop: &Propagation,
    features: &Matrix<S>,
    labels: &[Option<usize>],
    nodes: &[usize],
) -> Result<EvalReport, TrainError> {
    let y = labels_of(labels, nodes)?;
    let mut tape = Tape::new();
    let vars = tape.bind_frozen(params)?;
    let x = tape.constant(features.clone())?;
    let fwd = model.forward(&mut tape, prop, x, &vars, None)?;
    let idx: Index = nodes.into();
    let rows = tape.gather_rows(fwd.logits, &idx)?;
    let ones = vec![S::one(); model.config().num_classes];
    let loss = tape.softmax_cross_entropy(rows, &y.clone().into(), &ones)?;
    let auc = evaluate_auc(&positive_scores(tape.value(fwd.logits), nodes), &y)?;
    Ok(EvalReport {
        epoch: params.steps() as usize,
        loss: tape.scalar(loss).to_f64_lossy(),
        auc,
    })
}

/// Full-batch training on `split.train`, selecting the epoch with the best
/// validation AUC (ties keep the earlier epoch). Epoch 0 is the
/// initialization. When the validation set
/// lacks a class, the lowest training loss selects instead.
pub fn train<S: Scalar>(
    model: &Model,
    prop: &Propagation,
    features: &Matrix<S>,
    labels: &[Option<usize>],
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if S::PRECISION != cfg.precision {
        return Err(TrainError::Config(format!(
            "config asks for {} precision but training runs in {}",
            cfg.precision,
            S::PRECISION
        )));
    }
    if labels.len() != prop.num_nodes() {
        return Err(TrainError::Length {
            what: "labels",
            expected: prop.num_nodes(),
            found: labels.len(),
        });
    }
    split.validate(labels)?;
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let c = model.config().num_classes;
    let train_y = labels_of(labels, &split.train)?;
    if train_y.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(TrainError::SingleClass("training"));
    }
    if let Some(&bad) = train_y.iter().find(|&&y| y >= c) {
        return Err(TrainError::Layer(LayerError::Autodiff(AutodiffError::LabelOutOfRange {
            label: bad,
            classes: c,
        })));
    }
    let val_y = labels_of(labels, &split.val)?;
    let val_defined = val_y.contains(&1) && val_y.iter().any(|&y| y != 1);

    let weights: Vec<S> = match &cfg.class_weights {
        Some(w) if w.len() != c => {
            return Err(TrainError::Length {
                what: "class_weights",
                expected: c,
                found: w.len(),
            })
        }
        Some(w) => w.iter().map(|&v| S::of(v)).collect(),
        None => inverse_frequency_weights(labels, &split.train, c)
            .into_iter()
            .map(S::of)
            .collect(),
    };
    let train_idx: Index = split.train.as_slice().into();
    let train_labels: Index = Arc::from(train_y);

    let mut model_config = model.config().clone();
    model_config.seed = cfg.seed;
    let mut params: ParamStore<S> = init_params(&model_config, model.d_in(), cfg.seed);
    let mut best_params = params.clone();
    let mut best: Option<EpochMetrics> = None;
    let mut history = Vec::new();
    let mut since_best = 0;

    for epoch in 0..=cfg.max_epochs {
        params.zero_grad();
        let mut tape = Tape::new();
        let vars = tape.bind(&params)?;
        let x = tape.constant(features.clone())?;
        let fwd = model.forward(&mut tape, prop, x, &vars, None)?;
        let rows = tape.gather_rows(fwd.logits, &train_idx)?;
        let loss = tape.softmax_cross_entropy(rows, &train_labels, &weights)?;
        let train_loss = tape.scalar(loss).to_f64_lossy();
        let val_auc = if val_defined {
            Some(evaluate_auc(&positive_scores(tape.value(fwd.logits), &split.val), &val_y)?)
        } else {
            None
        };
        let row = EpochMetrics {
            epoch,
            train_loss,
            val_auc,
        };
        history.push(row);

        let improved = match (&best, val_auc) {
            (None, _) => true,
            (Some(b), Some(auc)) => auc > b.val_auc.unwrap_or(f64::NEG_INFINITY),
            (Some(b), None) => train_loss < b.train_loss,
        };
        if improved {
            best = Some(row);
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if epoch == cfg.max_epochs || (cfg.patience > 0 && since_best >= cfg.patience) {
            break;
        }
        tape.backward(loss, &mut params)?;
        adam_step(&mut params, cfg);
    }

    Ok(TrainOutcome {
        params: best_params,
        model_config,
        history,
        best: best.expect("at least one epoch is evaluated"),
    })
}

