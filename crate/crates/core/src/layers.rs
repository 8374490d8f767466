//! GAT, DGAT and DEDGAT attention layers, the softmax head, parameter
//! initialization and accounting.
//!
//! All layers share one attention recipe: per-edge score
//! `leaky_relu(a_topᵀ x_i + a_botᵀ y_j)`, softmaxed over the edges of node
//! `i`'s neighbor segment. The score is evaluated per node first and then
//! gathered per edge, which equals `aᵀ[x_i ‖ y_j]` without materializing the
//! concatenation.
//!
//! Self-loops belong to the in-branch only. The out-branch of DGAT and
//! DEDGAT never sees an edge `i -> i`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Index, Matrix, ParamStore, ParamVars, Tape, Var};
use crate::graph::DirectedGraph;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dimension mismatch for {what}: expected {expected:?}, found {found:?}")]
    Dimension {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("graph has {graph} nodes but features have {features} rows")]
    NodeCount { graph: usize, features: usize },
    #[error("edge mask has {found} entries, graph has {expected} edges")]
    MaskLength { expected: usize, found: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Gat,
    Dgat,
    Dedgat,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [LayerKind::Gat, LayerKind::Dgat, LayerKind::Dedgat];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Gat => "gat",
            LayerKind::Dgat => "dgat",
            LayerKind::Dedgat => "dedgat",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = LayerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gat" => Ok(LayerKind::Gat),
            "dgat" => Ok(LayerKind::Dgat),
            "dedgat" => Ok(LayerKind::Dedgat),
            other => Err(LayerError::Config(format!("unknown layer kind `{other}` (gat, dgat, dedgat)"))),
        }
    }
}

/// What a DEDGAT branch aggregates from its neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DedgatAggregation {
    /// `t_i` collects senders' `ŝ_j`, `s_i` collects receivers' `t̂_j`.
    OppositeRole,
    /// `t_i` collects `t̂_j`, `s_i` collects `ŝ_j`.
    SameRole,
}

impl DedgatAggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            DedgatAggregation::OppositeRole => "opposite",
            DedgatAggregation::SameRole => "same",
        }
    }
}

impl fmt::Display for DedgatAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DedgatAggregation {
    type Err = LayerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "opposite" => Ok(DedgatAggregation::OppositeRole),
            "same" => Ok(DedgatAggregation::SameRole),
            other => Err(LayerError::Config(format!("unknown aggregation `{other}` (opposite, same)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: LayerKind,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Negative-side slope of the attention nonlinearity and of the
    /// activation between layers.
    pub leaky_slope: f64,
    pub self_loops: bool,
    /// Adds a bias row to every linear map and to the head.
    pub bias: bool,
    pub aggregation: DedgatAggregation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: LayerKind::Dedgat,
            num_layers: 2,
            hidden_dim: 16,
            num_classes: 2,
            leaky_slope: 0.2,
            self_loops: true,
            bias: false,
            aggregation: DedgatAggregation::OppositeRole,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: LayerKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        if self.num_layers == 0 {
            return Err(LayerError::Config("num_layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(LayerError::Config("hidden_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(LayerError::Config("num_classes must be at least 2".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(LayerError::Config("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of layer `l`.
    pub fn layer_dims(&self, d_in: usize, l: usize) -> (usize, usize) {
        (if l == 0 { d_in } else { self.hidden_dim }, self.hidden_dim)
    }
}

/// Parameter counts split into attention layers and head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub layers: usize,
    pub head: usize,
    pub total: usize,
}

pub fn count_parameters(cfg: &ModelConfig, d_in: usize) -> ParamCount {
    let bias = usize::from(cfg.bias);
    let layers = (0..cfg.num_layers)
        .map(|l| {
            let (i, o) = cfg.layer_dims(d_in, l);
            match cfg.kind {
                LayerKind::Gat => i * o + 2 * o + bias * o,
                LayerKind::Dgat | LayerKind::Dedgat => 2 * (i * o + 2 * o + bias * o),
            }
        })
        .sum();
    let head = cfg.hidden_dim * cfg.num_classes + bias * cfg.num_classes;
    ParamCount {
        layers,
        head,
        total: layers + head,
    }
}

/// Names and shapes of every parameter, in store order.
pub fn param_shapes(cfg: &ModelConfig, d_in: usize) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    for l in 0..cfg.num_layers {
        let (i, o) = cfg.layer_dims(d_in, l);
        let maps: &[(&str, &str)] = match cfg.kind {
            LayerKind::Gat => &[("W", "a")],
            LayerKind::Dgat => &[("W", "a_t"), ("U", "a_s")],
            LayerKind::Dedgat => &[("w", "a_t"), ("u", "a_s")],
        };
        for (map, att) in maps {
            out.push((format!("layer{l}.{map}"), (i, o)));
            if cfg.bias {
                out.push((format!("layer{l}.{map}_bias"), (1, o)));
            }
            out.push((format!("layer{l}.{att}"), (2 * o, 1)));
        }
    }
    out.push(("head.V".into(), (cfg.hidden_dim, cfg.num_classes)));
    if cfg.bias {
        out.push(("head.V_bias".into(), (1, cfg.num_classes)));
    }
    out
}

/// Glorot-uniform weights and attention vectors, zero biases.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, d_in: usize, seed: u64) -> ParamStore<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, (r, c)) in param_shapes(cfg, d_in) {
        let value = if name.ends_with("_bias") {
            Matrix::zeros(r, c)
        } else {
            let bound = (6.0 / (r + c) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let data = (0..r * c).map(|_| S::of(dist.sample(&mut rng))).collect();
            Matrix::from_vec(r, c, data)
        };
        store.insert(name, value).expect("generated names are unique");
    }
    store
}

/// Edge index lists for one graph, shared by every layer and forward pass.
///
/// Edge ids `0..num_edges()` are the caller's graph; missing self-loops (when
/// requested) get ids after them and always carry mask value 1.
#[derive(Clone, Debug)]
pub struct Propagation {
    num_nodes: usize,
    num_edges: usize,
    loops_added: usize,
    edges: Vec<(usize, usize)>,
    in_seg: Index,
    in_nbr: Index,
    in_edge: Index,
    out_seg: Index,
    out_nbr: Index,
    out_edge: Index,
}

impl Propagation {
    pub fn new(graph: &DirectedGraph, self_loops: bool) -> Self {
        let extended = if self_loops { graph.with_self_loops() } else { graph.clone() };
        let edges = extended.edges().to_vec();
        let (mut in_seg, mut in_nbr, mut in_edge) = (Vec::new(), Vec::new(), Vec::new());
        let (mut out_seg, mut out_nbr, mut out_edge) = (Vec::new(), Vec::new(), Vec::new());
        for (e, &(src, dst)) in edges.iter().enumerate() {
            in_seg.push(dst);
            in_nbr.push(src);
            in_edge.push(e);
            if src != dst {
                out_seg.push(src);
                out_nbr.push(dst);
                out_edge.push(e);
            }
        }
        Self {
            num_nodes: graph.num_nodes(),
            num_edges: graph.num_edges(),
            loops_added: edges.len() - graph.num_edges(),
            edges,
            in_seg: in_seg.into(),
            in_nbr: in_nbr.into(),
            in_edge: in_edge.into(),
            out_seg: out_seg.into(),
            out_nbr: out_nbr.into(),
            out_edge: out_edge.into(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Edges of the original graph (the length an edge mask must have).
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Original edges followed by added self-loops.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// In-branch edge ids, in segment-op order. Entry `k` has segment
    /// (receiver) `in_segments()[k]` and neighbor (sender) `in_neighbors()[k]`.
    pub fn in_edges(&self) -> &Index {
        &self.in_edge
    }

    pub fn in_segments(&self) -> &Index {
        &self.in_seg
    }

    pub fn in_neighbors(&self) -> &Index {
        &self.in_nbr
    }

    /// Out-branch edge ids; segment is the sender, neighbor the receiver.
    pub fn out_edges(&self) -> &Index {
        &self.out_edge
    }

    pub fn out_segments(&self) -> &Index {
        &self.out_seg
    }

    pub fn out_neighbors(&self) -> &Index {
        &self.out_nbr
    }

    /// Per-branch mask columns from an `num_edges() x 1` mask.
    fn expand_mask<S: Scalar>(&self, tape: &mut Tape<S>, mask: Var) -> Result<(Var, Var), LayerError> {
        let (rows, cols) = tape.value(mask).shape();
        if rows != self.num_edges || cols != 1 {
            return Err(LayerError::MaskLength {
                expected: self.num_edges,
                found: rows * cols,
            });
        }
        let full = if self.loops_added > 0 {
            let ones = tape.constant(Matrix::filled(self.loops_added, 1, S::one()))?;
            tape.concat_rows(mask, ones)?
        } else {
            mask
        };
        let m_in = tape.gather_rows(full, &self.in_edge)?;
        let m_out = tape.gather_rows(full, &self.out_edge)?;
        Ok((m_in, m_out))
    }
}

/// Attention weights and output of one branch of one layer.
#[derive(Clone, Copy, Debug)]
pub struct BranchTrace {
    /// Softmax weights aligned with the branch's edge list, before masking.
    pub attention: Var,
    /// Aggregated `n x d_out` messages.
    pub output: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub in_branch: BranchTrace,
    pub out_branch: Option<BranchTrace>,
}

/// Tape handles of one GAT layer.
#[derive(Clone, Copy, Debug)]
pub struct GatVars {
    pub w: Var,
    pub bias: Option<Var>,
    pub a: Var,
}

/// Tape handles of one DGAT or DEDGAT layer: `w`/`u` are `W`/`U` for DGAT.
#[derive(Clone, Copy, Debug)]
pub struct DualVars {
    pub w: Var,
    pub u: Var,
    pub w_bias: Option<Var>,
    pub u_bias: Option<Var>,
    pub a_t: Var,
    pub a_s: Var,
}

/// In-role (`t`) and out-role (`s`) embeddings.
#[derive(Clone, Copy, Debug)]
pub struct DualState {
    pub t: Var,
    pub s: Var,
}

/// Per-branch edge masks, aligned with [`Propagation::in_edges`] and
/// [`Propagation::out_edges`].
#[derive(Clone, Copy, Debug)]
pub struct BranchMasks {
    pub in_branch: Var,
    pub out_branch: Var,
}

impl BranchMasks {
    pub fn new<S: Scalar>(tape: &mut Tape<S>, prop: &Propagation, mask: Var) -> Result<Self, LayerError> {
        let (in_branch, out_branch) = prop.expand_mask(tape, mask)?;
        Ok(Self { in_branch, out_branch })
    }
}

fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, bias: Option<Var>) -> Result<Var, AutodiffError> {
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Segment-softmaxed scores `leaky(a_topᵀ x_seg + a_botᵀ y_nbr)`.
#[allow(clippy::too_many_arguments)]
fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    x_self: Var,
    y_nbr: Var,
    a: Var,
    seg: &Index,
    nbr: &Index,
    n: usize,
    slope: S,
) -> Result<Var, LayerError> {
    let d = tape.value(x_self).cols();
    let shape = tape.value(a).shape();
    if shape != (2 * d, 1) {
        return Err(LayerError::Dimension {
            what: "attention vector".into(),
            expected: (2 * d, 1),
            found: shape,
        });
    }
    let a_top = tape.slice_rows(a, 0, d)?;
    let a_bot = tape.slice_rows(a, d, d)?;
    let node_self = tape.matmul(x_self, a_top)?;
    let node_nbr = tape.matmul(y_nbr, a_bot)?;
    let edge_self = tape.gather_rows(node_self, seg)?;
    let edge_nbr = tape.gather_rows(node_nbr, nbr)?;
    let raw = tape.add(edge_self, edge_nbr)?;
    let scores = tape.leaky_relu(raw, slope)?;
    Ok(tape.segment_softmax(scores, seg, n)?)
}

fn aggregate<S: Scalar>(
    tape: &mut Tape<S>,
    alpha: Var,
    mask: Option<Var>,
    messages: Var,
    seg: &Index,
    nbr: &Index,
    n: usize,
) -> Result<Var, AutodiffError> {
    let weights = match mask {
        Some(m) => tape.mul(alpha, m)?,
        None => alpha,
    };
    let per_edge = tape.gather_rows(messages, nbr)?;
    tape.segment_weighted_sum(weights, per_edge, seg, n)
}

fn check_rows<S: Scalar>(tape: &Tape<S>, prop: &Propagation, x: Var) -> Result<(), LayerError> {
    let rows = tape.value(x).rows();
    if rows != prop.num_nodes() {
        return Err(LayerError::NodeCount {
            graph: prop.num_nodes(),
            features: rows,
        });
    }
    Ok(())
}

/// `h'_i = Σ_{j -> i} α_ij W h_j` with `α` softmaxed over in-edges.
pub fn gat_forward<S: Scalar>(
    tape: &mut Tape<S>,
    prop: &Propagation,
    h: Var,
    p: &GatVars,
    slope: S,
    masks: Option<&BranchMasks>,
) -> Result<(Var, LayerTrace), LayerError> {
    check_rows(tape, prop, h)?;
    let n = prop.num_nodes();
    let wh = linear(tape, h, p.w, p.bias)?;
    let alpha = attention(tape, wh, wh, p.a, &prop.in_seg, &prop.in_nbr, n, slope)?;
    let out = aggregate(tape, alpha, masks.map(|m| m.in_branch), wh, &prop.in_seg, &prop.in_nbr, n)?;
    let trace = LayerTrace {
        in_branch: BranchTrace {
            attention: alpha,
            output: out,
        },
        out_branch: None,
    };
    Ok((out, trace))
}

/// In-branch over `T(i)` with `(W, a_t)` plus out-branch over `S(i)` with
/// `(U, a_s)`; the layer output is their sum.
pub fn dgat_forward<S: Scalar>(
    tape: &mut Tape<S>,
    prop: &Propagation,
    h: Var,
    p: &DualVars,
    slope: S,
    masks: Option<&BranchMasks>,
) -> Result<(Var, LayerTrace), LayerError> {
    check_rows(tape, prop, h)?;
    let n = prop.num_nodes();
    let wh = linear(tape, h, p.w, p.w_bias)?;
    let uh = linear(tape, h, p.u, p.u_bias)?;

    let alpha_in = attention(tape, wh, wh, p.a_t, &prop.in_seg, &prop.in_nbr, n, slope)?;
    let in_out = aggregate(tape, alpha_in, masks.map(|m| m.in_branch), wh, &prop.in_seg, &prop.in_nbr, n)?;

    let alpha_out = attention(tape, uh, uh, p.a_s, &prop.out_seg, &prop.out_nbr, n, slope)?;
    let out_out = aggregate(tape, alpha_out, masks.map(|m| m.out_branch), uh, &prop.out_seg, &prop.out_nbr, n)?;

    let h_next = tape.add(in_out, out_out)?;
    let trace = LayerTrace {
        in_branch: BranchTrace {
            attention: alpha_in,
            output: in_out,
        },
        out_branch: Some(BranchTrace {
            attention: alpha_out,
            output: out_out,
        }),
    };
    Ok((h_next, trace))
}

/// With `t̂ = t w` and `ŝ = s u`: the in-branch scores `a_tᵀ[t̂_i ‖ ŝ_j]` over
/// `T(i)`, the out-branch scores `a_sᵀ[ŝ_i ‖ t̂_j]` over `S(i)`. Messages
/// follow `aggregation`.
#[allow(clippy::too_many_arguments)]
pub fn dedgat_forward<S: Scalar>(
    tape: &mut Tape<S>,
    prop: &Propagation,
    state: DualState,
    p: &DualVars,
    slope: S,
    aggregation: DedgatAggregation,
    masks: Option<&BranchMasks>,
) -> Result<(DualState, LayerTrace), LayerError> {
    check_rows(tape, prop, state.t)?;
    check_rows(tape, prop, state.s)?;
    let n = prop.num_nodes();
    let t_hat = linear(tape, state.t, p.w, p.w_bias)?;
    let s_hat = linear(tape, state.s, p.u, p.u_bias)?;
    let (in_msg, out_msg) = match aggregation {
        DedgatAggregation::OppositeRole => (s_hat, t_hat),
        DedgatAggregation::SameRole => (t_hat, s_hat),
    };

    let alpha_in = attention(tape, t_hat, s_hat, p.a_t, &prop.in_seg, &prop.in_nbr, n, slope)?;
    let t_next = aggregate(tape, alpha_in, masks.map(|m| m.in_branch), in_msg, &prop.in_seg, &prop.in_nbr, n)?;

    let alpha_out = attention(tape, s_hat, t_hat, p.a_s, &prop.out_seg, &prop.out_nbr, n, slope)?;
    let s_next = aggregate(tape, alpha_out, masks.map(|m| m.out_branch), out_msg, &prop.out_seg, &prop.out_nbr, n)?;

    let trace = LayerTrace {
        in_branch: BranchTrace {
            attention: alpha_in,
            output: t_next,
        },
        out_branch: Some(BranchTrace {
            attention: alpha_out,
            output: s_next,
        }),
    };
    Ok((DualState { t: t_next, s: s_next }, trace))
}

pub fn finalize_dual<S: Scalar>(tape: &mut Tape<S>, state: DualState) -> Result<Var, LayerError> {
    Ok(tape.add(state.t, state.s)?)
}

/// `h V (+ b)`.
pub fn head_logits<S: Scalar>(tape: &mut Tape<S>, h: Var, v: Var, bias: Option<Var>) -> Result<Var, LayerError> {
    let (hs, vs) = (tape.value(h).shape(), tape.value(v).shape());
    if hs.1 != vs.0 {
        return Err(LayerError::Dimension {
            what: "head".into(),
            expected: (hs.1, vs.1),
            found: vs,
        });
    }
    Ok(linear(tape, h, v, bias)?)
}

/// Class probabilities `softmax(h V)` per row.
pub fn classify<S: Scalar>(tape: &mut Tape<S>, h: Var, v: Var) -> Result<Var, LayerError> {
    let logits = head_logits(tape, h, v, None)?;
    Ok(tape.softmax_rows(logits)?)
}

/// Result of a full model forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Final node embeddings fed to the head.
    pub embeddings: Var,
    pub logits: Var,
    pub traces: Vec<LayerTrace>,
}

/// A configured architecture for a fixed input width. Parameters live in a
/// separate [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    d_in: usize,
}

impl Model {
    pub fn new(config: ModelConfig, d_in: usize) -> Result<Self, LayerError> {
        config.validate()?;
        if d_in == 0 {
            return Err(LayerError::Config("input dimension must be at least 1".into()));
        }
        Ok(Self { config, d_in })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn param_count(&self) -> ParamCount {
        count_parameters(&self.config, self.d_in)
    }

    /// Initial parameters from the configured seed.
    pub fn init_params<S: Scalar>(&self) -> ParamStore<S> {
        init_params(&self.config, self.d_in, self.config.seed)
    }

    /// Fails unless `store` holds exactly this model's parameters.
    pub fn check_params<S: Scalar>(&self, store: &ParamStore<S>) -> Result<(), LayerError> {
        let shapes = param_shapes(&self.config, self.d_in);
        for (name, shape) in &shapes {
            let found = store.value(name)?.shape();
            if found != *shape {
                return Err(LayerError::Dimension {
                    what: name.clone(),
                    expected: *shape,
                    found,
                });
            }
        }
        if store.len() != shapes.len() {
            let known: Vec<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
            let extra = store.names().find(|n| !known.contains(n)).unwrap_or_default();
            return Err(LayerError::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn propagation(&self, graph: &DirectedGraph) -> Propagation {
        Propagation::new(graph, self.config.self_loops)
    }

    /// Records the forward pass. `mask`, when given, is an `E x 1` column
    /// over the original graph's edges that scales every attention weight.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        prop: &Propagation,
        features: Var,
        vars: &ParamVars,
        mask: Option<Var>,
    ) -> Result<Forward, LayerError> {
        let cols = tape.value(features).cols();
        if cols != self.d_in {
            return Err(LayerError::Dimension {
                what: "features".into(),
                expected: (prop.num_nodes(), self.d_in),
                found: tape.value(features).shape(),
            });
        }
        let masks = match mask {
            Some(m) => Some(BranchMasks::new(tape, prop, m)?),
            None => None,
        };
        let slope = S::of(self.config.leaky_slope);
        let bias = |name: String| -> Result<Option<Var>, LayerError> {
            if self.config.bias {
                Ok(Some(vars.get(&name)?))
            } else {
                Ok(None)
            }
        };
        let last = self.config.num_layers - 1;
        let mut traces = Vec::with_capacity(self.config.num_layers);

        let embeddings = match self.config.kind {
            LayerKind::Gat | LayerKind::Dgat => {
                let mut h = features;
                for l in 0..self.config.num_layers {
                    let (next, trace) = if self.config.kind == LayerKind::Gat {
                        let p = GatVars {
                            w: vars.get(&format!("layer{l}.W"))?,
                            bias: bias(format!("layer{l}.W_bias"))?,
                            a: vars.get(&format!("layer{l}.a"))?,
                        };
                        gat_forward(tape, prop, h, &p, slope, masks.as_ref())?
                    } else {
                        let p = DualVars {
                            w: vars.get(&format!("layer{l}.W"))?,
                            u: vars.get(&format!("layer{l}.U"))?,
                            w_bias: bias(format!("layer{l}.W_bias"))?,
                            u_bias: bias(format!("layer{l}.U_bias"))?,
                            a_t: vars.get(&format!("layer{l}.a_t"))?,
                            a_s: vars.get(&format!("layer{l}.a_s"))?,
                        };
                        dgat_forward(tape, prop, h, &p, slope, masks.as_ref())?
                    };
                    traces.push(trace);
                    h = if l < last { tape.leaky_relu(next, slope)? } else { next };
                }
                h
            }
            LayerKind::Dedgat => {
                let mut state = DualState { t: features, s: features };
                for l in 0..self.config.num_layers {
                    let p = DualVars {
                        w: vars.get(&format!("layer{l}.w"))?,
                        u: vars.get(&format!("layer{l}.u"))?,
                        w_bias: bias(format!("layer{l}.w_bias"))?,
                        u_bias: bias(format!("layer{l}.u_bias"))?,
                        a_t: vars.get(&format!("layer{l}.a_t"))?,
                        a_s: vars.get(&format!("layer{l}.a_s"))?,
                    };
                    let (next, trace) =
                        dedgat_forward(tape, prop, state, &p, slope, self.config.aggregation, masks.as_ref())?;
                    traces.push(trace);
                    state = if l < last {
                        DualState {
                            t: tape.leaky_relu(next.t, slope)?,
                            s: tape.leaky_relu(next.s, slope)?,
                        }
                    } else {
                        next
                    };
                }
                finalize_dual(tape, state)?
            }
        };

        let v = vars.get("head.V")?;
        let logits = head_logits(tape, embeddings, v, bias("head.V_bias".into())?)?;
        Ok(Forward {
            embeddings,
            logits,
            traces,
        })
    }

    /// Class probabilities for every node under frozen parameters.
    pub fn predict<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        prop: &Propagation,
        features: &Matrix<S>,
    ) -> Result<Matrix<S>, LayerError> {
        let mut tape = Tape::new();
        let vars = tape.bind_frozen(store)?;
        let x = tape.constant(features.clone())?;
        let fwd = self.forward(&mut tape, prop, x, &vars, None)?;
        let probs = tape.softmax_rows(fwd.logits)?;
        Ok(tape.value(probs).clone())
    }
}
