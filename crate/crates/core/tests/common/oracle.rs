//! Dense per-node loop evaluation of the layer equations. Nothing here uses
//! the tape or the edge index lists: neighbor sets come straight from the
//! graph and scores from an explicit concatenation `[x_i ‖ y_j]`.

use dgat_core::autodiff::{Matrix, ParamStore};
use dgat_core::graph::DirectedGraph;
use dgat_core::layers::{DedgatAggregation, LayerKind, ModelConfig};

pub type Dense = Vec<Vec<f64>>;

pub fn dense(m: &Matrix<f64>) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|c| (0..inner).map(|k| row[k] * b[k][c]).sum()).collect()
        })
        .collect()
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

/// `(neighbor, mask value)` pairs of `T(i)`, self-loop included when asked.
pub fn in_set(g: &DirectedGraph, i: usize, self_loops: bool, mask: Option<&[f64]>) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for j in 0..g.num_nodes() {
        if let Some(e) = g.find_edge(j, i) {
            out.push((j, mask.map_or(1.0, |m| m[e])));
        } else if j == i && self_loops {
            out.push((j, 1.0));
        }
    }
    out
}

/// `S(i)` without self-loops.
pub fn out_set(g: &DirectedGraph, i: usize, mask: Option<&[f64]>) -> Vec<(usize, f64)> {
    (0..g.num_nodes())
        .filter(|&j| j != i)
        .filter_map(|j| g.find_edge(i, j).map(|e| (j, mask.map_or(1.0, |m| m[e]))))
        .collect()
}

/// Normalized attention of node `i` over `set`, score `leaky(aᵀ[x_i ‖ y_j])`.
pub fn attention_weights(i: usize, set: &[(usize, f64)], x: &Dense, y: &Dense, a: &[f64], slope: f64) -> Vec<f64> {
    let scores: Vec<f64> = set
        .iter()
        .map(|&(j, _)| {
            let cat: Vec<f64> = x[i].iter().chain(&y[j]).copied().collect();
            assert_eq!(cat.len(), a.len());
            leaky(cat.iter().zip(a).map(|(c, w)| c * w).sum(), slope)
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn branch(sets: &[Vec<(usize, f64)>], x: &Dense, y: &Dense, a: &[f64], msg: &Dense, slope: f64) -> Dense {
    let d = msg.first().map_or(0, Vec::len);
    sets.iter()
        .enumerate()
        .map(|(i, set)| {
            let mut acc = vec![0.0; d];
            if set.is_empty() {
                return acc;
            }
            let alpha = attention_weights(i, set, x, y, a, slope);
            for (&(j, m), w) in set.iter().zip(alpha) {
                for (o, v) in acc.iter_mut().zip(&msg[j]) {
                    *o += w * m * v;
                }
            }
            acc
        })
        .collect()
}

fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn activate(a: &Dense, slope: f64) -> Dense {
    a.iter().map(|r| r.iter().map(|&v| leaky(v, slope)).collect()).collect()
}

fn param(store: &ParamStore<f64>, name: &str) -> Dense {
    dense(store.value(name).unwrap())
}

fn column(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.value(name).unwrap().as_slice().to_vec()
}

fn linear(store: &ParamStore<f64>, cfg: &ModelConfig, x: &Dense, name: &str) -> Dense {
    let mut y = matmul(x, &param(store, name));
    if cfg.bias {
        let b = column(store, &format!("{name}_bias"));
        for row in &mut y {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
    }
    y
}

pub struct LayerOut {
    pub in_branch: Dense,
    pub out_branch: Option<Dense>,
}

pub struct ModelOut {
    pub layers: Vec<LayerOut>,
    pub embeddings: Dense,
    pub logits: Dense,
}

pub fn model_forward(
    cfg: &ModelConfig,
    store: &ParamStore<f64>,
    g: &DirectedGraph,
    x: &Dense,
    mask: Option<&[f64]>,
) -> ModelOut {
    let n = g.num_nodes();
    let ins: Vec<_> = (0..n).map(|i| in_set(g, i, cfg.self_loops, mask)).collect();
    let outs: Vec<_> = (0..n).map(|i| out_set(g, i, mask)).collect();
    let slope = cfg.leaky_slope;
    let last = cfg.num_layers - 1;
    let mut layers = Vec::new();

    let embeddings = match cfg.kind {
        LayerKind::Gat => {
            let mut h = x.clone();
            for l in 0..cfg.num_layers {
                let wh = linear(store, cfg, &h, &format!("layer{l}.W"));
                let a = column(store, &format!("layer{l}.a"));
                let out = branch(&ins, &wh, &wh, &a, &wh, slope);
                h = if l < last { activate(&out, slope) } else { out.clone() };
                layers.push(LayerOut {
                    in_branch: out,
                    out_branch: None,
                });
            }
            h
        }
        LayerKind::Dgat => {
            let mut h = x.clone();
            for l in 0..cfg.num_layers {
                let wh = linear(store, cfg, &h, &format!("layer{l}.W"));
                let uh = linear(store, cfg, &h, &format!("layer{l}.U"));
                let a_t = column(store, &format!("layer{l}.a_t"));
                let a_s = column(store, &format!("layer{l}.a_s"));
                let hin = branch(&ins, &wh, &wh, &a_t, &wh, slope);
                let hout = branch(&outs, &uh, &uh, &a_s, &uh, slope);
                let sum = add(&hin, &hout);
                h = if l < last { activate(&sum, slope) } else { sum };
                layers.push(LayerOut {
                    in_branch: hin,
                    out_branch: Some(hout),
                });
            }
            h
        }
        LayerKind::Dedgat => {
            let (mut t, mut s) = (x.clone(), x.clone());
            for l in 0..cfg.num_layers {
                let t_hat = linear(store, cfg, &t, &format!("layer{l}.w"));
                let s_hat = linear(store, cfg, &s, &format!("layer{l}.u"));
                let a_t = column(store, &format!("layer{l}.a_t"));
                let a_s = column(store, &format!("layer{l}.a_s"));
                let (in_msg, out_msg) = match cfg.aggregation {
                    DedgatAggregation::OppositeRole => (&s_hat, &t_hat),
                    DedgatAggregation::SameRole => (&t_hat, &s_hat),
                };
                let t_next = branch(&ins, &t_hat, &s_hat, &a_t, in_msg, slope);
                let s_next = branch(&outs, &s_hat, &t_hat, &a_s, out_msg, slope);
                if l < last {
                    t = activate(&t_next, slope);
                    s = activate(&s_next, slope);
                } else {
                    t = t_next.clone();
                    s = s_next.clone();
                }
                layers.push(LayerOut {
                    in_branch: t_next,
                    out_branch: Some(s_next),
                });
            }
            add(&t, &s)
        }
    };
    let mut logits = matmul(&embeddings, &param(store, "head.V"));
    if cfg.bias {
        let b = column(store, "head.V_bias");
        for row in &mut logits {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
    }
    ModelOut {
        layers,
        embeddings,
        logits,
    }
}
