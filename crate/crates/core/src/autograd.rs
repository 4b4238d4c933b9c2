//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] is built fresh for every episode. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and the
//! backward pass is a single reverse sweep.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Affine(NodeId, f64),
    Relu(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    ShiftRows { x: NodeId, offset: isize, segment: usize },
    RepeatLastRow { x: NodeId, segment: usize },
    MeanRows(NodeId),
    Sum(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { x: NodeId, xhat: Mat, inv_std: Vec<f64> },
    BatchNorm { x: NodeId, xhat: Mat, inv_std: Vec<f64> },
    L2NormalizeRows { x: NodeId, norms: Vec<f64>, eps: f64 },
    ScalarFn { x: NodeId, grad: Mat },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].needs_grad)
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Reads a parameter; its gradient is tracked only if the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Copies the value of `x` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *o += b;
            }
        }
        let g = self.any_grad(&[x, row]);
        self.push(v, Op::AddRow(x, row), g)
    }

    /// Multiplies every row of `x` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *o *= b;
            }
        }
        let g = self.any_grad(&[x, row]);
        self.push(v, Op::MulRow(x, row), g)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x).map(|a| scale * a + shift);
        let g = self.any_grad(&[x]);
        self.push(v, Op::Affine(x, scale), g)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        let g = self.any_grad(&[x]);
        self.push(v, Op::Relu(x), g)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice_rows(start, len);
        let g = self.any_grad(&[x]);
        self.push(v, Op::SliceRows(x, start), g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice_cols(start, len);
        let g = self.any_grad(&[x]);
        self.push(v, Op::SliceCols(x, start), g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::vstack(&mats).expect("concat_rows column mismatch");
        let g = self.any_grad(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::hstack(&mats).expect("concat_cols row mismatch");
        let g = self.any_grad(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    /// Shifts rows forward in time by `offset` within consecutive blocks of
    /// `segment` rows, filling vacated rows with zeros. Row `t` of the output
    /// holds row `t - offset` of the input.
    pub fn shift_rows(&mut self, x: NodeId, offset: isize, segment: usize) -> NodeId {
        let xv = self.value(x);
        assert!(segment > 0 && xv.rows() % segment == 0, "rows must be a multiple of the segment");
        let mut v = Mat::zeros(xv.rows(), xv.cols());
        for s in 0..xv.rows() / segment {
            for t in 0..segment {
                let src = t as isize - offset;
                if src >= 0 && (src as usize) < segment {
                    v.row_mut(s * segment + t).copy_from_slice(xv.row(s * segment + src as usize));
                }
            }
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::ShiftRows { x, offset, segment }, g)
    }

    /// Replaces every row of each `segment`-row block by that block's last row.
    pub fn repeat_last_row(&mut self, x: NodeId, segment: usize) -> NodeId {
        let xv = self.value(x);
        assert!(segment > 0 && xv.rows() % segment == 0, "rows must be a multiple of the segment");
        let mut v = Mat::zeros(xv.rows(), xv.cols());
        for s in 0..xv.rows() / segment {
            let last = xv.row(s * segment + segment - 1).to_vec();
            for t in 0..segment {
                v.row_mut(s * segment + t).copy_from_slice(&last);
            }
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::RepeatLastRow { x, segment }, g)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mean_rows();
        let g = self.any_grad(&[x]);
        self.push(v, Op::MeanRows(x), g)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Mat::scalar(self.value(x).sum());
        let g = self.any_grad(&[x]);
        self.push(v, Op::Sum(x), g)
    }

    /// Sum of `1 x 1` nodes.
    pub fn add_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        let cat = self.concat_cols(xs);
        self.sum(cat)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = Mat::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&crate::tensor::softmax(xv.row(r)));
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::Softmax(x), g)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = Mat::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let lse = crate::tensor::log_sum_exp(xv.row(r));
            for (o, a) in v.row_mut(r).iter_mut().zip(xv.row(r)) {
                *o = a - lse;
            }
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::LogSoftmax(x), g)
    }

    /// Per-row standardisation (no affine parameters).
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let mut xhat = Mat::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let n = xv.cols() as f64;
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (o, a) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (a - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.any_grad(&[x]);
        let v = xhat.clone();
        self.push(v, Op::LayerNorm { x, xhat, inv_std }, g)
    }

    /// Per-column standardisation over all rows, using the batch's own
    /// (biased) statistics. Returns the node plus the column means and
    /// unbiased variances for running-average updates.
    pub fn batch_norm_cols(&mut self, x: NodeId, eps: f64) -> (NodeId, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = rows as f64;
        let mut means = vec![0.0; cols];
        for r in 0..rows {
            for (m, a) in means.iter_mut().zip(xv.row(r)) {
                *m += a;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = vec![0.0; cols];
        for r in 0..rows {
            for ((v, a), m) in vars.iter_mut().zip(xv.row(r)).zip(&means) {
                *v += (a - m) * (a - m);
            }
        }
        vars.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Mat::zeros(rows, cols);
        for r in 0..rows {
            for (c, o) in xhat.row_mut(r).iter_mut().enumerate() {
                *o = (xv[(r, c)] - means[c]) * inv_std[c];
            }
        }
        let unbiased: Vec<f64> =
            vars.iter().map(|v| if rows > 1 { v * n / (n - 1.0) } else { *v }).collect();
        let g = self.any_grad(&[x]);
        let v = xhat.clone();
        let id = self.push(v, Op::BatchNorm { x, xhat, inv_std }, g);
        (id, means, unbiased)
    }

    /// Scales each row to unit L2 norm; norms below `eps` are floored at `eps`.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let mut v = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = crate::tensor::norm(xv.row(r)).max(eps);
            v.row_mut(r).iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::L2NormalizeRows { x, norms, eps }, g)
    }

    /// A scalar function of `x` whose gradient has already been computed.
    pub fn scalar_fn(&mut self, x: NodeId, value: f64, grad: Mat) -> NodeId {
        assert_eq!(self.value(x).shape(), grad.shape());
        let g = self.any_grad(&[x]);
        self.push(Mat::scalar(value), Op::ScalarFn { x, grad }, g)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, dy: &Mat, grads: &mut [Option<Mat>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, g: Mat| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, dy.matmul_nt(val(*b)));
                }
                if self.needs_grad(*b) {
                    acc(*b, val(*a).matmul_tn(dy));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, dy.matmul(val(*b)));
                }
                if self.needs_grad(*b) {
                    acc(*b, dy.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, dy.zip_map(val(*b), |g, y| g * y));
                }
                if self.needs_grad(*b) {
                    acc(*b, dy.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, dy.clone());
                if self.needs_grad(*row) {
                    acc(*row, column_sums(dy));
                }
            }
            Op::MulRow(x, row) => {
                let r = val(*row);
                if self.needs_grad(*x) {
                    let mut g = dy.clone();
                    for i in 0..g.rows() {
                        for (o, s) in g.row_mut(i).iter_mut().zip(r.row(0)) {
                            *o *= s;
                        }
                    }
                    acc(*x, g);
                }
                if self.needs_grad(*row) {
                    acc(*row, column_sums(&dy.zip_map(val(*x), |g, a| g * a)));
                }
            }
            Op::Affine(x, s) => acc(*x, dy.map(|v| v * s)),
            Op::Relu(x) => acc(*x, dy.zip_map(val(*x), |g, a| if a > 0.0 { g } else { 0.0 })),
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let mut g = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..dy.rows() {
                    g.row_mut(start + r).copy_from_slice(dy.row(r));
                }
                acc(*x, g);
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let mut g = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..dy.rows() {
                    g.row_mut(r)[*start..start + dy.cols()].copy_from_slice(dy.row(r));
                }
                acc(*x, g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if self.needs_grad(p) {
                        acc(p, dy.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if self.needs_grad(p) {
                        acc(p, dy.slice_cols(off, cols));
                    }
                    off += cols;
                }
            }
            Op::ShiftRows { x, offset, segment } => {
                let mut g = Mat::zeros(dy.rows(), dy.cols());
                for s in 0..dy.rows() / segment {
                    for t in 0..*segment {
                        let src = t as isize - offset;
                        if src >= 0 && (src as usize) < *segment {
                            g.row_mut(s * segment + src as usize).copy_from_slice(dy.row(s * segment + t));
                        }
                    }
                }
                acc(*x, g);
            }
            Op::RepeatLastRow { x, segment } => {
                let mut g = Mat::zeros(dy.rows(), dy.cols());
                for s in 0..dy.rows() / segment {
                    let last = s * segment + segment - 1;
                    for t in 0..*segment {
                        let src = dy.row(s * segment + t).to_vec();
                        for (o, v) in g.row_mut(last).iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                acc(*x, g);
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let n = xv.rows() as f64;
                let mut g = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for (o, v) in g.row_mut(r).iter_mut().zip(dy.row(0)) {
                        *o = v / n;
                    }
                }
                acc(*x, g);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(*x, Mat::filled(xv.rows(), xv.cols(), dy.item()));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut g = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = crate::tensor::dot(dy.row(r), y.row(r));
                    for ((o, d), p) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                        *o = p * (d - inner);
                    }
                }
                acc(*x, g);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut g = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = dy.row(r).iter().sum();
                    for ((o, d), ly) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                        *o = d - ly.exp() * total;
                    }
                }
                acc(*x, g);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = xhat.cols() as f64;
                let mut g = Mat::zeros(xhat.rows(), xhat.cols());
                for r in 0..xhat.rows() {
                    let d = dy.row(r);
                    let h = xhat.row(r);
                    let mean_d = d.iter().sum::<f64>() / n;
                    let mean_dh = crate::tensor::dot(d, h) / n;
                    for ((o, dv), hv) in g.row_mut(r).iter_mut().zip(d).zip(h) {
                        *o = inv_std[r] * (dv - mean_d - hv * mean_dh);
                    }
                }
                acc(*x, g);
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                let (rows, cols) = xhat.shape();
                let n = rows as f64;
                let mut mean_d = vec![0.0; cols];
                let mut mean_dh = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        mean_d[c] += dy[(r, c)];
                        mean_dh[c] += dy[(r, c)] * xhat[(r, c)];
                    }
                }
                mean_d.iter_mut().for_each(|v| *v /= n);
                mean_dh.iter_mut().for_each(|v| *v /= n);
                let mut g = Mat::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        g[(r, c)] = inv_std[c] * (dy[(r, c)] - mean_d[c] - xhat[(r, c)] * mean_dh[c]);
                    }
                }
                acc(*x, g);
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let y = &node.value;
                let mut g = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = norms[r];
                    let d = dy.row(r);
                    if n > *eps {
                        let proj = crate::tensor::dot(y.row(r), d);
                        for ((o, dv), yv) in g.row_mut(r).iter_mut().zip(d).zip(y.row(r)) {
                            *o = (dv - yv * proj) / n;
                        }
                    } else {
                        for (o, dv) in g.row_mut(r).iter_mut().zip(d) {
                            *o = dv / n;
                        }
                    }
                }
                acc(*x, g);
            }
            Op::ScalarFn { x, grad } => {
                let s = dy.item();
                acc(*x, grad.map(|v| v * s));
            }
        }
    }

    /// Parameters referenced by this graph, paired with their node ids.
    fn param_nodes(&self) -> impl Iterator<Item = (usize, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(p) if n.needs_grad => Some((i, p)),
            _ => None,
        })
    }
}

fn column_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if any flowed there.
    pub fn wrt(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adds this sweep's parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        for (node, pid) in graph.param_nodes() {
            if let Some(g) = &self.grads[node] {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }
}
