use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{AutodiffError, Matrix, ParamStore};
use crate::Scalar;

/// Shared index list (edge -> node maps, row selections).
pub type Index = Arc<[usize]>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Local gradient rule of a custom op: `(input values, output value,
/// output gradient) -> one gradient per input`.
pub type BackwardFn<S> = Box<dyn Fn(&[&Matrix<S>], &Matrix<S>, &Matrix<S>) -> Vec<Matrix<S>> + Send + Sync>;

enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddRow(usize, usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, idx: Index },
    LeakyRelu { x: usize, slope: S },
    Sigmoid(usize),
    SegmentSoftmax { x: usize, seg: Index },
    SegmentWeightedSum { w: usize, m: usize, seg: Index },
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        labels: Index,
        weights: Arc<[S]>,
        probs: Matrix<S>,
    },
    Sum(usize),
    Mean(usize),
    BinaryEntropy(usize),
    Custom { inputs: Vec<usize>, backward: BackwardFn<S> },
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
    // (store id, parameter index) for trainable leaves.
    param: Option<(u64, usize)>,
}

/// Parameter name -> tape handle, produced by [`Tape::bind`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, AutodiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradients of one scalar with respect to every node on a tape.
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when `var` does not influence the differentiated scalar.
    pub fn get(&self, var: Var) -> Option<&Matrix<S>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(Option::as_ref)
    }
}

/// Records dense-matrix operations in execution order for reverse-mode
/// differentiation. A tape belongs to one thread of execution; build a new
/// one per forward pass.
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, left: a, right: b }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn val(&self, i: usize) -> &Matrix<S> {
        &self.nodes[i].value
    }

    fn push(&mut self, op_name: &'static str, value: Matrix<S>, op: Op<S>) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, param: None });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        let i = self.idx(v).expect("var belongs to this tape");
        self.val(i)
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> S {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Matrix<S>) -> Result<Var, AutodiffError> {
        self.push("constant", value, Op::Leaf)
    }

    /// Records every parameter of `store` as a trainable leaf.
    pub fn bind(&mut self, store: &ParamStore<S>) -> Result<ParamVars, AutodiffError> {
        let mut vars = BTreeMap::new();
        for (i, p) in store.params().iter().enumerate() {
            let v = self.push("param", p.value.clone(), Op::Leaf)?;
            self.nodes[v.idx].param = Some((store.id(), i));
            vars.insert(p.name.clone(), v);
        }
        Ok(ParamVars { vars })
    }

    /// Records every parameter of `store` as a constant.
    pub fn bind_frozen(&mut self, store: &ParamStore<S>) -> Result<ParamVars, AutodiffError> {
        let mut vars = BTreeMap::new();
        for p in store.params() {
            vars.insert(p.name.clone(), self.constant(p.value.clone())?);
        }
        Ok(ParamVars { vars })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = self.val(ia).matmul(self.val(ib));
        self.push("matmul", out, Op::MatMul(ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let mut out = self.val(ia).clone();
        out.add_assign(self.val(ib));
        self.push("add", out, Op::Add(ia, ib))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self
            .val(ia)
            .as_slice()
            .iter()
            .zip(self.val(ib).as_slice())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push("mul", Matrix::from_vec(sa.0, sa.1, data), Op::Mul(ia, ib))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|v| v * factor);
        self.push("scale", out, Op::Scale(ia, factor))
    }

    /// Adds the `1 x d` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sb != (1, sa.1) {
            return Err(shape_err("add_row", sa, sb));
        }
        let mut out = self.val(ia).clone();
        let bias = self.val(ib).row(0).to_vec();
        for r in 0..sa.0 {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(ia, ib))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.0 != sb.0 {
            return Err(shape_err("concat_cols", sa, sb));
        }
        let mut out = Matrix::zeros(sa.0, sa.1 + sb.1);
        for r in 0..sa.0 {
            let row = out.row_mut(r);
            row[..sa.1].copy_from_slice(self.nodes[ia].value.row(r));
            row[sa.1..].copy_from_slice(self.nodes[ib].value.row(r));
        }
        self.push("concat_cols", out, Op::ConcatCols(ia, ib))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.1 != sb.1 {
            return Err(shape_err("concat_rows", sa, sb));
        }
        let mut data = self.val(ia).as_slice().to_vec();
        data.extend_from_slice(self.val(ib).as_slice());
        self.push("concat_rows", Matrix::from_vec(sa.0 + sb.0, sa.1, data), Op::ConcatRows(ia, ib))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let ix = self.idx(x)?;
        let (rows, cols) = self.val(ix).shape();
        if start + len > rows {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: rows,
            });
        }
        let data = self.val(ix).as_slice()[start * cols..(start + len) * cols].to_vec();
        self.push("slice_rows", Matrix::from_vec(len, cols, data), Op::SliceRows { x: ix, start })
    }

    /// Output row `e` is row `idx[e]` of `x`; gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, idx: &Index) -> Result<Var, AutodiffError> {
        let ix = self.idx(x)?;
        let src = self.val(ix);
        let (rows, cols) = src.shape();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx.iter() {
            if r >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    len: rows,
                });
            }
            data.extend_from_slice(src.row(r));
        }
        let out = Matrix::from_vec(idx.len(), cols, data);
        self.push("gather_rows", out, Op::GatherRows { x: ix, idx: idx.clone() })
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere.
    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Result<Var, AutodiffError> {
        let ix = self.idx(x)?;
        let out = self.val(ix).map(|v| if v >= S::zero() { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu { x: ix, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x)?;
        let out = self.val(ix).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(ix))
    }

    /// Softmax of an `E x 1` score column within each segment
    /// (`segment_of[e]` < `num_segments`), shifted by the segment maximum.
    pub fn segment_softmax(&mut self, scores: Var, segment_of: &Index, num_segments: usize) -> Result<Var, AutodiffError> {
        let ix = self.idx(scores)?;
        let s = self.val(ix);
        check_segments("segment_softmax", s, segment_of, num_segments)?;
        let out = segment_softmax_values(s.as_slice(), segment_of, num_segments);
        self.push(
            "segment_softmax",
            Matrix::from_vec(out.len(), 1, out),
            Op::SegmentSoftmax {
                x: ix,
                seg: segment_of.clone(),
            },
        )
    }

    /// Row `i` of the `num_segments x d` output is the sum over edges `e`
    /// with `segment_of[e] == i` of `weights[e] * messages[e]`; empty
    /// segments give zero rows.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        messages: Var,
        segment_of: &Index,
        num_segments: usize,
    ) -> Result<Var, AutodiffError> {
        let (iw, im) = (self.idx(weights)?, self.idx(messages)?);
        let (w, m) = (self.val(iw), self.val(im));
        check_segments("segment_weighted_sum", w, segment_of, num_segments)?;
        if m.rows() != w.rows() {
            return Err(shape_err("segment_weighted_sum", w.shape(), m.shape()));
        }
        let d = m.cols();
        let mut out = Matrix::zeros(num_segments, d);
        for (e, &seg) in segment_of.iter().enumerate() {
            let we = w.get(e, 0);
            let msg = m.row(e);
            for (o, &v) in out.row_mut(seg).iter_mut().zip(msg) {
                *o += we * v;
            }
        }
        self.push(
            "segment_weighted_sum",
            out,
            Op::SegmentWeightedSum {
                w: iw,
                m: im,
                seg: segment_of.clone(),
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x)?;
        let out = softmax_rows(self.val(ix));
        self.push("softmax_rows", out, Op::SoftmaxRows(ix))
    }

    /// Mean over rows of `class_weights[label] * -log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Index, class_weights: &[S]) -> Result<Var, AutodiffError> {
        let il = self.idx(logits)?;
        let x = self.val(il);
        let (n, c) = x.shape();
        if labels.len() != n {
            return Err(shape_err("softmax_cross_entropy", (n, c), (labels.len(), 1)));
        }
        if class_weights.len() != c {
            return Err(shape_err("softmax_cross_entropy", (n, c), (1, class_weights.len())));
        }
        if n == 0 {
            return Err(AutodiffError::EmptyInput("softmax_cross_entropy"));
        }
        let mut total = S::zero();
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(AutodiffError::LabelOutOfRange { label: y, classes: c });
            }
            let row = x.row(r);
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, S::neg_infinity()), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
            // ln(sum exp(v - max)) with the argmax term (exactly 1) split out.
            let rest: S = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != arg)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            total += class_weights[y] * ((max - row[y]) + rest.ln_1p());
        }
        let probs = softmax_rows(x);
        let loss = total / S::of(n as f64);
        self.push(
            "softmax_cross_entropy",
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                labels: labels.clone(),
                weights: class_weights.into(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x)?;
        let s = self.val(ix).sum();
        self.push("sum", Matrix::scalar(s), Op::Sum(ix))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x)?;
        let m = self.val(ix);
        if m.is_empty() {
            return Err(AutodiffError::EmptyInput("mean"));
        }
        let v = m.sum() / S::of(m.len() as f64);
        self.push("mean", Matrix::scalar(v), Op::Mean(ix))
    }

    /// Elementwise `-p ln p - (1 - p) ln(1 - p)` for `p` in (0, 1); inputs are
    /// clamped one machine epsilon away from the ends.
    pub fn binary_entropy(&mut self, p: Var) -> Result<Var, AutodiffError> {
        let ip = self.idx(p)?;
        let out = self.val(ip).map(|v| {
            let v = clamp_open_unit(v);
            -(v * v.ln() + (S::one() - v) * (S::one() - v).ln())
        });
        self.push("binary_entropy", out, Op::BinaryEntropy(ip))
    }

    /// Records an op with a caller-supplied value and gradient rule.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix<S>, backward: BackwardFn<S>) -> Result<Var, AutodiffError> {
        let inputs = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        self.push("custom", value, Op::Custom { inputs, backward })
    }

    /// Reverse sweep from the scalar `loss`, returning every node's gradient.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<S>, AutodiffError> {
        let il = self.idx(loss)?;
        let shape = self.val(il).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar { shape });
        }
        let mut grads: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Matrix::scalar(S::one()));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    /// Accumulates d(loss)/d(param) into `store` for every leaf bound from it.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<(), AutodiffError> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads.grads) {
            if let (Some((sid, pi)), Some(g)) = (node.param, g) {
                if sid == store.id() {
                    store.accumulate_grad(pi, &g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix<S>, grads: &mut [Option<Matrix<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul(&self.val(*b).transpose());
                let gb = self.val(*a).transpose().matmul(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let ga = zip_map(g, vb, |g, y| g * y);
                let gb = zip_map(g, va, |g, x| g * x);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * *f)),
            Op::AddRow(a, b) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, gb);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.val(*a).cols();
                let cb = self.val(*b).cols();
                let mut ga = Matrix::zeros(g.rows(), ca);
                let mut gb = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::ConcatRows(a, b) => {
                let (ra, cols) = self.val(*a).shape();
                let rb = self.val(*b).rows();
                let ga = Matrix::from_vec(ra, cols, g.as_slice()[..ra * cols].to_vec());
                let gb = Matrix::from_vec(rb, cols, g.as_slice()[ra * cols..].to_vec());
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.val(*x).shape();
                let mut gx = Matrix::zeros(rows, cols);
                gx.as_mut_slice()[start * cols..start * cols + g.len()].copy_from_slice(g.as_slice());
                accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let (rows, cols) = self.val(*x).shape();
                let mut gx = Matrix::zeros(rows, cols);
                for (e, &r) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(e)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LeakyRelu { x, slope } => {
                let gx = zip_map(g, self.val(*x), |g, v| if v >= S::zero() { g } else { g * *slope });
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(g, &node.value, |g, y| g * y * (S::one() - y));
                accumulate(grads, *x, gx);
            }
            Op::SegmentSoftmax { x, seg } => {
                let y = node.value.as_slice();
                let n = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![S::zero(); n];
                for (e, &s) in seg.iter().enumerate() {
                    dots[s] += y[e] * g.get(e, 0);
                }
                let data = seg
                    .iter()
                    .enumerate()
                    .map(|(e, &s)| y[e] * (g.get(e, 0) - dots[s]))
                    .collect();
                accumulate(grads, *x, Matrix::from_vec(y.len(), 1, data));
            }
            Op::SegmentWeightedSum { w, m, seg } => {
                let (vw, vm) = (self.val(*w), self.val(*m));
                let mut gw = Matrix::zeros(vw.rows(), 1);
                let mut gm = Matrix::zeros(vm.rows(), vm.cols());
                for (e, &s) in seg.iter().enumerate() {
                    let grow = g.row(s);
                    let mut dot = S::zero();
                    for (&gv, &mv) in grow.iter().zip(vm.row(e)) {
                        dot += gv * mv;
                    }
                    gw.set(e, 0, dot);
                    let we = vw.get(e, 0);
                    for (o, &gv) in gm.row_mut(e).iter_mut().zip(grow) {
                        *o = we * gv;
                    }
                }
                accumulate(grads, *w, gw);
                accumulate(grads, *m, gm);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: S = y.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    for c in 0..y.cols() {
                        gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let upstream = g.get(0, 0);
                let n = S::of(labels.len() as f64);
                let mut gx = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let f = upstream * weights[y] / n;
                    let row = gx.row_mut(r);
                    row[y] -= S::one();
                    for v in row.iter_mut() {
                        *v *= f;
                    }
                }
                accumulate(grads, *logits, gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.val(*x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(x) => {
                let (r, c) = self.val(*x).shape();
                let v = g.get(0, 0) / S::of((r * c) as f64);
                accumulate(grads, *x, Matrix::filled(r, c, v));
            }
            Op::BinaryEntropy(x) => {
                let gx = zip_map(g, self.val(*x), |g, p| {
                    let p = clamp_open_unit(p);
                    g * ((S::one() - p) / p).ln()
                });
                accumulate(grads, *x, gx);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Matrix<S>> = inputs.iter().map(|&k| self.val(k)).collect();
                let local = backward(&vals, &node.value, g);
                for (&k, gk) in inputs.iter().zip(local) {
                    accumulate(grads, k, gk);
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Matrix<S>>], i: usize, g: Matrix<S>) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, f: impl Fn(S, S) -> S) -> Matrix<S> {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn check_segments<S: Scalar>(op: &'static str, col: &Matrix<S>, seg: &Index, n: usize) -> Result<(), AutodiffError> {
    if col.cols() != 1 || col.rows() != seg.len() {
        return Err(shape_err(op, col.shape(), (seg.len(), 1)));
    }
    if let Some(&bad) = seg.iter().find(|&&s| s >= n) {
        return Err(AutodiffError::IndexOutOfRange { op, index: bad, len: n });
    }
    Ok(())
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn clamp_open_unit<S: Scalar>(v: S) -> S {
    let eps = S::epsilon();
    v.max(eps).min(S::one() - eps)
}

pub(crate) fn segment_softmax_values<S: Scalar>(scores: &[S], seg: &[usize], n: usize) -> Vec<S> {
    let mut max = vec![S::neg_infinity(); n];
    for (&s, &k) in scores.iter().zip(seg) {
        max[k] = max[k].max(s);
    }
    let exps: Vec<S> = scores.iter().zip(seg).map(|(&s, &k)| (s - max[k]).exp()).collect();
    let mut denom = vec![S::zero(); n];
    for (&e, &k) in exps.iter().zip(seg) {
        denom[k] += e;
    }
    exps.iter().zip(seg).map(|(&e, &k)| e / denom[k]).collect()
}

pub(crate) fn softmax_rows<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
