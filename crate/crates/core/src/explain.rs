//! Edge-mask explanations of single predictions and the in/out directional
//! bias statistics built on top of them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, ParamStore, Tape};
use crate::graph::DirectedGraph;
use crate::layers::{LayerError, Model};
use crate::train::{adam_step, TrainConfig};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid explainer config: {0}")]
    Config(String),
    #[error("target node {node} out of range for a graph with {num_nodes} nodes")]
    TargetOutOfRange { node: usize, num_nodes: usize },
    #[error("model has not been trained (0 optimizer steps)")]
    Untrained,
    #[error("no centers to explain")]
    NoCenters,
    #[error("edge table line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Layer(#[from] LayerError),
}

impl From<AutodiffError> for ExplainError {
    fn from(e: AutodiffError) -> Self {
        ExplainError::Layer(e.into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainConfig {
    /// Subgraph radius; `None` uses the model depth.
    pub hops: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub sparsity_coeff: f64,
    pub entropy_coeff: f64,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            hops: None,
            epochs: 100,
            learning_rate: 0.05,
            sparsity_coeff: 0.005,
            entropy_coeff: 0.1,
            seed: 0,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.hops == Some(0) {
            return Err(ExplainError::Config("hops must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ExplainError::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [("sparsity_coeff", self.sparsity_coeff), ("entropy_coeff", self.entropy_coeff)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ExplainError::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Importance of each edge in a target's neighborhood, keyed by the edge ids
/// of the full graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMask {
    pub target: usize,
    /// The class the explained prediction picked.
    pub predicted_class: usize,
    /// `(edge id, weight)` in increasing edge-id order, weights in (0, 1).
    pub entries: Vec<(usize, f64)>,
}

impl EdgeMask {
    pub fn get(&self, edge: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&edge, |&(e, _)| e)
            .ok()
            .map(|k| self.entries[k].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Edge id with the largest weight (lowest id on ties).
    pub fn argmax(&self) -> Option<usize> {
        self.entries
            .iter()
            .fold(None, |best: Option<(usize, f64)>, &(e, w)| match best {
                Some((_, bw)) if bw >= w => best,
                _ => Some((e, w)),
            })
            .map(|(e, _)| e)
    }
}

/// The target's undirected `hops` neighborhood, local features, the local id
/// of the target and the original id of every local edge.
pub struct Neighborhood<S> {
    pub graph: DirectedGraph,
    pub nodes: Vec<usize>,
    pub features: Matrix<S>,
    pub target: usize,
    pub edge_ids: Vec<usize>,
}

pub fn neighborhood<S: Scalar>(
    graph: &DirectedGraph,
    features: &Matrix<S>,
    target: usize,
    hops: usize,
) -> Result<Neighborhood<S>, ExplainError> {
    if target >= graph.num_nodes() {
        return Err(ExplainError::TargetOutOfRange {
            node: target,
            num_nodes: graph.num_nodes(),
        });
    }
    let nodes = graph.hop_distance(target, true).within(hops);
    let (sub, edge_ids) = graph.induced_subgraph(&nodes);
    let mut local = Matrix::zeros(nodes.len(), features.cols());
    for (k, &v) in nodes.iter().enumerate() {
        local.row_mut(k).copy_from_slice(features.row(v));
    }
    let target = nodes.binary_search(&target).expect("the target is in its own neighborhood");
    Ok(Neighborhood {
        graph: sub,
        nodes,
        features: local,
        target,
        edge_ids,
    })
}

/// Class probabilities at `target` with every edge of its neighborhood scaled
/// by `mask` (all ones when `None`).
pub fn masked_prediction<S: Scalar>(
    model: &Model,
    params: &ParamStore<S>,
    hood: &Neighborhood<S>,
    mask: Option<&[f64]>,
) -> Result<Vec<f64>, ExplainError> {
    let prop = model.propagation(&hood.graph);
    let mut tape = Tape::new();
    let vars = tape.bind_frozen(params)?;
    let x = tape.constant(hood.features.clone())?;
    let m = match mask {
        Some(m) => Some(tape.constant(Matrix::from_vec(m.len(), 1, m.iter().map(|&v| S::of(v)).collect()))?),
        None => None,
    };
    let fwd = model.forward(&mut tape, &prop, x, &vars, m)?;
    let probs = tape.softmax_rows(fwd.logits)?;
    Ok(tape.value(probs).row(hood.target).iter().map(|v| v.to_f64_lossy()).collect())
}

/// Learns a sigmoid edge mask over the target's neighborhood that keeps the
/// model's prediction while staying sparse and near-binary.
pub fn explain_node<S: Scalar>(
    graph: &DirectedGraph,
    features: &Matrix<S>,
    model: &Model,
    params: &ParamStore<S>,
    target: usize,
    cfg: &ExplainConfig,
) -> Result<EdgeMask, ExplainError> {
    cfg.validate()?;
    model.check_params(params)?;
    if target >= graph.num_nodes() {
        return Err(ExplainError::TargetOutOfRange {
            node: target,
            num_nodes: graph.num_nodes(),
        });
    }
    if params.steps() == 0 {
        return Err(ExplainError::Untrained);
    }
    let hops = cfg.hops.unwrap_or(model.config().num_layers);
    let hood = neighborhood(graph, features, target, hops)?;
    let probs = masked_prediction(model, params, &hood, None)?;
    let predicted_class = probs
        .iter()
        .enumerate()
        .fold(0, |best, (c, &p)| if p > probs[best] { c } else { best });

    let e = hood.edge_ids.len();
    if e == 0 {
        return Ok(EdgeMask {
            target,
            predicted_class,
            entries: Vec::new(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init: Vec<S> = (0..e).map(|_| S::of(0.01 * rng.sample::<f64, _>(StandardNormal))).collect();
    let mut logits = ParamStore::new();
    logits.insert("mask", Matrix::from_vec(e, 1, init))?;
    let adam = TrainConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let prop = model.propagation(&hood.graph);
    let target_row = [hood.target].into();
    let label = [predicted_class].into();
    let ones = vec![S::one(); model.config().num_classes];

    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let frozen = tape.bind_frozen(params)?;
        let m = tape.bind(&logits)?.get("mask")?;
        let mask = tape.sigmoid(m)?;
        let x = tape.constant(hood.features.clone())?;
        let fwd = model.forward(&mut tape, &prop, x, &frozen, Some(mask))?;
        let row = tape.gather_rows(fwd.logits, &target_row)?;
        let fit = tape.softmax_cross_entropy(row, &label, &ones)?;
        let size = tape.mean(mask)?;
        let size = tape.scale(size, S::of(cfg.sparsity_coeff))?;
        let h = tape.binary_entropy(mask)?;
        let h = tape.mean(h)?;
        let h = tape.scale(h, S::of(cfg.entropy_coeff))?;
        let loss = tape.add(fit, size)?;
        let loss = tape.add(loss, h)?;
        logits.zero_grad();
        tape.backward(loss, &mut logits)?;
        adam_step(&mut logits, &adam);
    }

    let final_logits = logits.value("mask")?;
    let mut entries: Vec<(usize, f64)> = hood
        .edge_ids
        .iter()
        .zip(final_logits.as_slice())
        .map(|(&id, &l)| (id, 1.0 / (1.0 + (-l.to_f64_lossy()).exp())))
        .collect();
    entries.sort_by_key(|&(id, _)| id);
    Ok(EdgeMask {
        target,
        predicted_class,
        entries,
    })
}

/// Why an edge belongs to neither direction set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Exclusion {
    /// An endpoint cannot reach the center.
    Unreachable,
    /// The reverse edge is missing.
    NotMutual,
    /// Both endpoints are the same number of hops from the center.
    SameShell,
}

impl Exclusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Exclusion::Unreachable => "unreachable",
            Exclusion::NotMutual => "not_mutual",
            Exclusion::SameShell => "same_shell",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeSet {
    /// Points toward the center.
    In,
    /// Points away from the center.
    Out,
    Excluded(Exclusion),
}

impl EdgeSet {
    fn columns(self) -> (&'static str, &'static str) {
        match self {
            EdgeSet::In => ("in", "-"),
            EdgeSet::Out => ("out", "-"),
            EdgeSet::Excluded(r) => ("excluded", r.as_str()),
        }
    }
}

impl fmt::Display for EdgeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeSet::Excluded(r) => write!(f, "excluded({})", r.as_str()),
            other => f.write_str(other.columns().0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifiedEdge {
    pub edge: usize,
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    pub set: EdgeSet,
}

/// Direction memberships of one explanation and, once thresholded, the
/// share of each set above the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub center: usize,
    pub edges: Vec<ClassifiedEdge>,
    pub threshold: Option<f64>,
    pub count_in_above: usize,
    pub count_out_above: usize,
    /// `None` when the set is empty.
    pub proportion_in: Option<f64>,
    pub proportion_out: Option<f64>,
    /// `proportion_in / proportion_out`, `None` when either is undefined or
    /// the denominator is zero.
    pub ratio: Option<f64>,
}

impl BiasReport {
    fn weights(&self, set: EdgeSet) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.edges.iter().filter(move |e| e.set == set).map(|e| (e.edge, e.weight))
    }

    pub fn s_in(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights(EdgeSet::In)
    }

    pub fn s_out(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights(EdgeSet::Out)
    }

    pub fn count(&self, set: EdgeSet) -> usize {
        self.edges.iter().filter(|e| e.set == set).count()
    }

    /// Tab-separated edge table with a two-line preamble.
    pub fn to_table(&self) -> String {
        let mut out = format!("# center\t{}\n", self.center);
        match self.threshold {
            Some(t) => out.push_str(&format!("# threshold\t{t}\n")),
            None => out.push_str("# threshold\t-\n"),
        }
        out.push_str("edge_id\tsrc\tdst\tweight\tset\treason\n");
        for e in &self.edges {
            let (set, reason) = e.set.columns();
            out.push_str(&format!("{}\t{}\t{}\t{}\t{set}\t{reason}\n", e.edge, e.src, e.dst, e.weight));
        }
        out
    }

    /// Inverse of [`BiasReport::to_table`]; proportions are recomputed.
    pub fn from_table(text: &str) -> Result<Self, ExplainError> {
        let err = |line: usize, msg: String| ExplainError::Parse { line: line + 1, msg };
        let mut center = None;
        let mut threshold = None;
        let mut edges = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with("edge_id") {
                continue;
            }
            let cols: Vec<&str> = line.trim_start_matches("# ").split('\t').collect();
            if line.starts_with('#') {
                match cols.as_slice() {
                    ["center", v] => center = Some(v.parse().map_err(|_| err(ln, format!("bad center `{v}`")))?),
                    ["threshold", "-"] => {}
                    ["threshold", v] => {
                        threshold = Some(v.parse().map_err(|_| err(ln, format!("bad threshold `{v}`")))?)
                    }
                    _ => return Err(err(ln, format!("unknown preamble `{line}`"))),
                }
                continue;
            }
            let [edge, src, dst, weight, set, reason] = cols.as_slice() else {
                return Err(err(ln, format!("expected 6 columns, found {}", cols.len())));
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(ln, format!("bad integer `{s}`")));
            let set = match (*set, *reason) {
                ("in", _) => EdgeSet::In,
                ("out", _) => EdgeSet::Out,
                ("excluded", r) => EdgeSet::Excluded(match r {
                    "unreachable" => Exclusion::Unreachable,
                    "not_mutual" => Exclusion::NotMutual,
                    "same_shell" => Exclusion::SameShell,
                    other => return Err(err(ln, format!("unknown reason `{other}`"))),
                }),
                (other, _) => return Err(err(ln, format!("unknown set `{other}`"))),
            };
            edges.push(ClassifiedEdge {
                edge: num(edge)?,
                src: num(src)?,
                dst: num(dst)?,
                weight: f64::from_str(weight).map_err(|_| err(ln, format!("bad weight `{weight}`")))?,
                set,
            });
        }
        let center = center.ok_or_else(|| err(0, "missing `# center` line".into()))?;
        let report = memberships(center, edges);
        Ok(match threshold {
            Some(t) => bias_proportions(&report, t),
            None => report,
        })
    }
}

fn memberships(center: usize, edges: Vec<ClassifiedEdge>) -> BiasReport {
    BiasReport {
        center,
        edges,
        threshold: None,
        count_in_above: 0,
        count_out_above: 0,
        proportion_in: None,
        proportion_out: None,
        ratio: None,
    }
}

/// Assigns every masked edge `i -> j` to the in-set when `i` is farther
/// from `center` than `j` (undirected hops), to the out-set when it is
/// closer, and excludes it when the reverse edge is missing, the hop counts
/// tie, or an endpoint is unreachable.
pub fn classify_edges_by_direction(graph: &DirectedGraph, mask: &EdgeMask, center: usize) -> BiasReport {
    let dist = graph.hop_distance(center, true);
    let edges = mask
        .entries
        .iter()
        .map(|&(edge, weight)| {
            let (src, dst) = graph.edge(edge);
            let set = match (dist.get(src), dist.get(dst)) {
                (Some(_), Some(_)) if !graph.is_mutual(edge) => EdgeSet::Excluded(Exclusion::NotMutual),
                (Some(a), Some(b)) if a > b => EdgeSet::In,
                (Some(a), Some(b)) if a < b => EdgeSet::Out,
                (Some(_), Some(_)) => EdgeSet::Excluded(Exclusion::SameShell),
                _ => EdgeSet::Excluded(Exclusion::Unreachable),
            };
            ClassifiedEdge {
                edge,
                src,
                dst,
                weight,
                set,
            }
        })
        .collect();
    memberships(center, edges)
}

fn share_above(weights: impl Iterator<Item = f64>, threshold: f64) -> (usize, Option<f64>) {
    let (mut above, mut total) = (0usize, 0usize);
    for w in weights {
        total += 1;
        above += usize::from(w > threshold);
    }
    (above, (total > 0).then(|| above as f64 / total as f64))
}

fn ratio(p_in: Option<f64>, p_out: Option<f64>) -> Option<f64> {
    match (p_in, p_out) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    }
}

/// Fills in the counts above `threshold` (strictly), the proportions and
/// their ratio.
pub fn bias_proportions(report: &BiasReport, threshold: f64) -> BiasReport {
    let (count_in_above, proportion_in) = share_above(report.s_in().map(|(_, w)| w), threshold);
    let (count_out_above, proportion_out) = share_above(report.s_out().map(|(_, w)| w), threshold);
    BiasReport {
        threshold: Some(threshold),
        count_in_above,
        count_out_above,
        proportion_in,
        proportion_out,
        ratio: ratio(proportion_in, proportion_out),
        ..report.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count_in: usize,
    pub count_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetSummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub count_above: usize,
    pub proportion_above: Option<f64>,
}

impl SetSummary {
    fn of(mut w: Vec<f64>, threshold: f64) -> Self {
        w.sort_by(f64::total_cmp);
        let n = w.len();
        let median = match n {
            0 => None,
            _ if n % 2 == 1 => Some(w[n / 2]),
            _ => Some(0.5 * (w[n / 2 - 1] + w[n / 2])),
        };
        let (count_above, proportion_above) = share_above(w.iter().copied(), threshold);
        SetSummary {
            count: n,
            mean: (n > 0).then(|| w.iter().sum::<f64>() / n as f64),
            median,
            count_above,
            proportion_above,
        }
    }
}

/// Pooled in/out weight distributions over many explained centers.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasSummary {
    pub threshold: f64,
    pub reports: Vec<BiasReport>,
    pub histogram: Vec<HistogramBin>,
    pub s_in: SetSummary,
    pub s_out: SetSummary,
    /// Ratio of the pooled proportions above the threshold.
    pub ratio: Option<f64>,
}

impl BiasSummary {
    /// `bin_lo, bin_hi, count_in, count_out`, tab separated.
    pub fn histogram_table(&self) -> String {
        let mut out = String::from("bin_lo\tbin_hi\tcount_in\tcount_out\n");
        for b in &self.histogram {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", b.lo, b.hi, b.count_in, b.count_out));
        }
        out
    }

    /// One row per set with count, mean, median and the share above the
    /// threshold, plus a ratio row.
    pub fn summary_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| v.to_string());
        let mut out = String::from("set\tcount\tmean\tmedian\tcount_above\tproportion_above\n");
        for (name, s) in [("in", &self.s_in), ("out", &self.s_out)] {
            out.push_str(&format!(
                "{name}\t{}\t{}\t{}\t{}\t{}\n",
                s.count,
                opt(s.mean),
                opt(s.median),
                s.count_above,
                opt(s.proportion_above)
            ));
        }
        out.push_str(&format!("# threshold\t{}\n# ratio\t{}\n", self.threshold, opt(self.ratio)));
        out
    }
}

/// Equal-width bins over [0, 1]; the last bin includes 1.
pub fn histogram(s_in: &[f64], s_out: &[f64], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let bin = |w: f64| ((w.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|k| HistogramBin {
            lo: k as f64 / bins as f64,
            hi: (k + 1) as f64 / bins as f64,
            count_in: 0,
            count_out: 0,
        })
        .collect();
    s_in.iter().for_each(|&w| out[bin(w)].count_in += 1);
    s_out.iter().for_each(|&w| out[bin(w)].count_out += 1);
    out
}

pub const HISTOGRAM_BINS: usize = 10;

/// Explains every center (in parallel, each with seed `cfg.seed + center`),
/// classifies its edges and pools the weights.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_bias<S: Scalar>(
    graph: &DirectedGraph,
    features: &Matrix<S>,
    model: &Model,
    params: &ParamStore<S>,
    centers: &[usize],
    cfg: &ExplainConfig,
    threshold: f64,
) -> Result<BiasSummary, ExplainError> {
    if centers.is_empty() {
        return Err(ExplainError::NoCenters);
    }
    let reports = centers
        .par_iter()
        .map(|&c| {
            let local = ExplainConfig {
                seed: cfg.seed.wrapping_add(c as u64),
                ..cfg.clone()
            };
            let mask = explain_node(graph, features, model, params, c, &local)?;
            Ok(bias_proportions(&classify_edges_by_direction(graph, &mask, c), threshold))
        })
        .collect::<Result<Vec<_>, ExplainError>>()?;
    Ok(summarize(reports, threshold))
}

/// Pools already classified reports.
pub fn summarize(reports: Vec<BiasReport>, threshold: f64) -> BiasSummary {
    let pooled = |set: EdgeSet| -> Vec<f64> {
        reports
            .iter()
            .flat_map(|r| r.edges.iter().filter(|e| e.set == set).map(|e| e.weight))
            .collect()
    };
    let (w_in, w_out) = (pooled(EdgeSet::In), pooled(EdgeSet::Out));
    let histogram = histogram(&w_in, &w_out, HISTOGRAM_BINS);
    let s_in = SetSummary::of(w_in, threshold);
    let s_out = SetSummary::of(w_out, threshold);
    BiasSummary {
        threshold,
        reports,
        histogram,
        ratio: ratio(s_in.proportion_above, s_out.proportion_above),
        s_in,
        s_out,
    }
}

/// Default centers: labeled-positive test nodes, at most `cap` of them,
/// sampled with `seed` when there are more.
pub fn default_centers(labels: &[Option<usize>], test: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    let positives: Vec<usize> = test.iter().copied().filter(|&i| labels.get(i) == Some(&Some(1))).collect();
    if positives.len() <= cap {
        return positives;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, positives.len(), cap)
        .into_iter()
        .map(|k| positives[k])
        .collect();
    picked.sort_unstable();
    picked
}
