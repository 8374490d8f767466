//! Immutable sparse directed graph with stable edge identifiers.
//!
//! Edges keep the id they were given at construction (their position in the
//! input list). Two permutations of those ids, one grouped by source and one
//! grouped by destination, give contiguous out- and in-neighbor ranges, so an
//! edge has a single identity whichever direction it is traversed in.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge ({src}, {dst}) references a node outside [0, {num_nodes})")]
    NodeOutOfRange {
        src: usize,
        dst: usize,
        num_nodes: usize,
    },
    #[error("duplicate edge ({src}, {dst})")]
    DuplicateEdge { src: usize, dst: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectedGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    // Edge ids sorted by (src, dst); node i owns out_order[out_offsets[i]..out_offsets[i + 1]].
    out_offsets: Vec<usize>,
    out_order: Vec<usize>,
    // Edge ids sorted by (dst, src).
    in_offsets: Vec<usize>,
    in_order: Vec<usize>,
}

impl DirectedGraph {
    /// Builds the graph; edge ids follow the order of `edges`.
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        for &(src, dst) in &edges {
            if src >= num_nodes || dst >= num_nodes {
                return Err(GraphError::NodeOutOfRange {
                    src,
                    dst,
                    num_nodes,
                });
            }
        }

        let (out_offsets, out_order) = group_by(num_nodes, &edges, |&(s, d)| (s, d));
        for w in out_order.windows(2) {
            if edges[w[0]] == edges[w[1]] {
                let (src, dst) = edges[w[0]];
                return Err(GraphError::DuplicateEdge { src, dst });
            }
        }
        let (in_offsets, in_order) = group_by(num_nodes, &edges, |&(s, d)| (d, s));

        Ok(Self {
            num_nodes,
            edges,
            out_offsets,
            out_order,
            in_offsets,
            in_order,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// All edges as `(src, dst)`, indexed by edge id.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> (usize, usize) {
        self.edges[id]
    }

    /// `(src, edge_id)` for every edge `src -> node`, ordered by `src`.
    ///
    /// Panics if `node` is out of range.
    pub fn in_neighbors(&self, node: usize) -> impl ExactSizeIterator<Item = (usize, usize)> + '_ {
        let ids = &self.in_order[self.in_offsets[node]..self.in_offsets[node + 1]];
        ids.iter().map(move |&e| (self.edges[e].0, e))
    }

    /// `(dst, edge_id)` for every edge `node -> dst`, ordered by `dst`.
    ///
    /// Panics if `node` is out of range.
    pub fn out_neighbors(&self, node: usize) -> impl ExactSizeIterator<Item = (usize, usize)> + '_ {
        let ids = &self.out_order[self.out_offsets[node]..self.out_offsets[node + 1]];
        ids.iter().map(move |&e| (self.edges[e].1, e))
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.in_offsets[node + 1] - self.in_offsets[node]
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.out_offsets[node + 1] - self.out_offsets[node]
    }

    /// Id of the edge `src -> dst`, if present.
    pub fn find_edge(&self, src: usize, dst: usize) -> Option<usize> {
        if src >= self.num_nodes || dst >= self.num_nodes {
            return None;
        }
        let ids = &self.out_order[self.out_offsets[src]..self.out_offsets[src + 1]];
        ids.binary_search_by(|&e| self.edges[e].1.cmp(&dst))
            .ok()
            .map(|pos| ids[pos])
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.find_edge(src, dst).is_some()
    }

    /// Appends a self-loop `i -> i` for every node that lacks one. Existing
    /// edge ids are unchanged; new loops get ids after them in node order.
    pub fn with_self_loops(&self) -> DirectedGraph {
        let mut edges = self.edges.clone();
        edges.extend((0..self.num_nodes).filter(|&i| !self.has_edge(i, i)).map(|i| (i, i)));
        DirectedGraph::new(self.num_nodes, edges).expect("self-loop augmentation keeps the graph simple")
    }

    /// Same edge ids, every edge flipped.
    pub fn reversed(&self) -> DirectedGraph {
        let edges = self.edges.iter().map(|&(s, d)| (d, s)).collect();
        DirectedGraph::new(self.num_nodes, edges).expect("reversal keeps the graph simple")
    }

    /// Breadth-first hop counts from `source`. With `undirected`, every edge
    /// may be walked against its direction as well.
    pub fn hop_distance(&self, source: usize, undirected: bool) -> HopDistances {
        assert!(source < self.num_nodes, "source {source} out of range");
        let mut dist = vec![None; self.num_nodes];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let next = dist[u].expect("queued nodes have a distance") + 1;
            let mut visit = |v: usize| {
                if dist[v].is_none() {
                    dist[v] = Some(next);
                    queue.push_back(v);
                }
            };
            for (v, _) in self.out_neighbors(u) {
                visit(v);
            }
            if undirected {
                for (v, _) in self.in_neighbors(u) {
                    visit(v);
                }
            }
        }
        HopDistances { source, dist }
    }

    /// Ordered pairs `(i, j)` with both `i -> j` and `j -> i` present; each
    /// reciprocated pair shows up once per direction, self-loops once.
    pub fn mutual_edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .copied()
            .filter(|&(s, d)| self.has_edge(d, s))
            .collect()
    }

    pub fn is_mutual(&self, edge_id: usize) -> bool {
        let (s, d) = self.edges[edge_id];
        self.has_edge(d, s)
    }

    /// Subgraph induced by `nodes` (local id = position in `nodes`).
    /// Returns the subgraph and, per local edge, the original edge id.
    /// Edge order follows the original ids.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> (DirectedGraph, Vec<usize>) {
        let mut local = vec![usize::MAX; self.num_nodes];
        for (k, &v) in nodes.iter().enumerate() {
            local[v] = k;
        }
        let mut kept = Vec::new();
        let mut edges = Vec::new();
        for (e, &(s, d)) in self.edges.iter().enumerate() {
            if local[s] != usize::MAX && local[d] != usize::MAX {
                kept.push(e);
                edges.push((local[s], local[d]));
            }
        }
        let sub = DirectedGraph::new(nodes.len(), edges).expect("induced subgraph of a simple graph is simple");
        (sub, kept)
    }
}

fn group_by<F>(num_nodes: usize, edges: &[(usize, usize)], key: F) -> (Vec<usize>, Vec<usize>)
where
    F: Fn(&(usize, usize)) -> (usize, usize),
{
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&e| key(&edges[e]));
    let mut offsets = vec![0usize; num_nodes + 1];
    for e in edges {
        offsets[key(e).0 + 1] += 1;
    }
    for i in 0..num_nodes {
        offsets[i + 1] += offsets[i];
    }
    (offsets, order)
}

/// Hop counts from a source node; `None` marks unreachable nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HopDistances {
    pub source: usize,
    pub dist: Vec<Option<usize>>,
}

impl HopDistances {
    pub fn get(&self, node: usize) -> Option<usize> {
        self.dist[node]
    }

    /// Nodes within `radius` hops, in increasing node-id order.
    pub fn within(&self, radius: usize) -> Vec<usize> {
        self.dist
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.filter(|&d| d <= radius).map(|_| i))
            .collect()
    }
}
