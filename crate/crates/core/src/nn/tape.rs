//! Define-by-run reverse-mode tape over a fixed operator set.
//!
//! Every node is evaluated eagerly when it is pushed. `Graph::backward` walks
//! the tape in reverse and returns parameter gradients keyed by name; nodes
//! that do not depend on any parameter are skipped.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::mat::Mat;
use super::params::ParamStore;

pub type NodeId = usize;

/// Weighted row-aggregation operator: `out[i] = Σ_j w_ij · x[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparse {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl Sparse {
    pub fn new(rows: usize, cols: usize) -> Self {
        Sparse {
            rows,
            cols,
            entries: vec![Vec::new(); rows],
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.nnz() == 0
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(
            x.rows, self.cols,
            "sparse aggregate over {} sources given {} rows",
            self.cols, x.rows
        );
        let mut out = Mat::zeros(self.rows, x.cols);
        for (i, row) in self.entries.iter().enumerate() {
            let o = out.row_mut(i);
            for &(j, w) in row {
                for (oc, xc) in o.iter_mut().zip(x.row(j)) {
                    *oc += w * xc;
                }
            }
        }
        out
    }
}

/// Neighbor lists for max pooling: `out[i] = max_{j ∈ lists[i]} x[j]`, zero when empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub sources: usize,
    pub lists: Vec<Vec<usize>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Affine { x: NodeId, scale: f64 },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Gather { x: NodeId, index: Arc<Vec<Option<usize>>> },
    Aggregate { x: NodeId, op: Arc<Sparse> },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    MeanRows(NodeId),
    Broadcast(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads(pub BTreeMap<String, Mat>);

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.0.get(name)
    }

    pub fn accumulate(&mut self, name: &str, g: &Mat) {
        match self.0.get_mut(name) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.0.insert(name.to_string(), g.clone());
            }
        }
    }

    /// Merge `other` into `self` (name order is deterministic).
    pub fn merge(&mut self, other: &Grads) {
        for (k, v) in &other.0 {
            self.accumulate(k, v);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.0.values_mut() {
            v.scale(k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(Mat::norm_sq).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

const NONE: usize = usize::MAX;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, m: Mat) -> NodeId {
        self.push(Op::Leaf, m, false)
    }

    /// Bind a named parameter; repeated calls with the same name share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"))
            .clone();
        let id = self.push(Op::Param(name.to_string()), value, true);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// `a + 1·bias` with `bias` a single row.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows, 1, "bias must be a single row");
        assert_eq!(av.cols, bv.cols, "bias width");
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(Op::AddRow(a, bias), v, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = e.max(0.0);
        }
        let ng = self.ng(x);
        self.push(Op::Relu(x), v, ng)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = softplus(*e);
        }
        let ng = self.ng(x);
        self.push(Op::Softplus(x), v, ng)
    }

    /// `scale·x + shift`
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = scale * *e + shift;
        }
        let ng = self.ng(x);
        self.push(Op::Affine { x, scale }, v, ng)
    }

    /// Column-wise concatenation of equal-height blocks.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat heights differ");
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::Concat(parts.to_vec()), v, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice out of range");
        let mut v = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(Op::Slice { x, start }, v, ng)
    }

    /// Row selection; `None` produces a zero row.
    pub fn gather(&mut self, x: NodeId, index: Arc<Vec<Option<usize>>>) -> NodeId {
        let xv = self.value(x);
        let mut v = Mat::zeros(index.len(), xv.cols);
        for (i, src) in index.iter().enumerate() {
            if let Some(j) = *src {
                v.row_mut(i).copy_from_slice(xv.row(j));
            }
        }
        let ng = self.ng(x);
        self.push(Op::Gather { x, index }, v, ng)
    }

    pub fn aggregate(&mut self, x: NodeId, op: Arc<Sparse>) -> NodeId {
        let v = op.apply(self.value(x));
        let ng = self.ng(x);
        self.push(Op::Aggregate { x, op }, v, ng)
    }

    pub fn max_pool(&mut self, x: NodeId, nbrs: &Neighbors) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows, nbrs.sources, "max_pool source count");
        let cols = xv.cols;
        let mut v = Mat::zeros(nbrs.lists.len(), cols);
        let mut argmax = vec![NONE; nbrs.lists.len() * cols];
        for (i, list) in nbrs.lists.iter().enumerate() {
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut arg = NONE;
                for &j in list {
                    let val = xv[(j, c)];
                    if val > best {
                        best = val;
                        arg = j;
                    }
                }
                if arg != NONE {
                    v[(i, c)] = best;
                    argmax[i * cols + c] = arg;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Op::MaxPool { x, argmax }, v, ng)
    }

    /// Mean over rows, producing a single row.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = Mat::zeros(1, xv.cols);
        if xv.rows > 0 {
            for r in 0..xv.rows {
                for (o, e) in v.data.iter_mut().zip(xv.row(r)) {
                    *o += e;
                }
            }
            v.scale(1.0 / xv.rows as f64);
        }
        let ng = self.ng(x);
        self.push(Op::MeanRows(x), v, ng)
    }

    /// Repeat a single row `rows` times.
    pub fn broadcast(&mut self, x: NodeId, rows: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1, "broadcast expects one row");
        let mut v = Mat::zeros(rows, xv.cols);
        for r in 0..rows {
            v.row_mut(r).copy_from_slice(&xv.data);
        }
        let ng = self.ng(x);
        self.push(Op::Broadcast(x), v, ng)
    }

    /// Reverse pass from the given output gradients.
    pub fn backward(&self, seeds: &[(NodeId, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.value(*id).shape(), "seed shape for node {id}");
            acc(&mut grads, *id, g);
            top = top.max(*id + 1);
        }

        let mut out = Grads::default();
        for id in (0..top).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(name) => out.accumulate(name, &g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        acc(&mut grads, *a, &ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t_matmul(&g);
                        acc(&mut grads, *b, &gb);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g);
                    }
                    if self.ng(*b) {
                        let mut gb = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, e) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += e;
                            }
                        }
                        acc(&mut grads, *b, &gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g);
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, &g);
                    }
                }
                Op::Relu(x) => {
                    let y = self.value(id);
                    let mut gx = g;
                    for (e, yv) in gx.data.iter_mut().zip(&y.data) {
                        if *yv <= 0.0 {
                            *e = 0.0;
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (e, xe) in gx.data.iter_mut().zip(&xv.data) {
                        *e *= sigmoid(*xe);
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::Affine { x, scale } => {
                    let mut gx = g;
                    gx.scale(*scale);
                    acc(&mut grads, *x, &gx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        if self.ng(p) {
                            let mut gp = Mat::zeros(g.rows, w);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            acc(&mut grads, p, &gp);
                        }
                        off += w;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::Gather { x, index } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for (i, src) in index.iter().enumerate() {
                        if let Some(j) = *src {
                            for (o, e) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                                *o += e;
                            }
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::Aggregate { x, op } => {
                    let mut gx = Mat::zeros(op.cols, g.cols);
                    for (i, row) in op.entries.iter().enumerate() {
                        for &(j, w) in row {
                            for (o, e) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                                *o += w * e;
                            }
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    let cols = g.cols;
                    for i in 0..g.rows {
                        for c in 0..cols {
                            let j = argmax[i * cols + c];
                            if j != NONE {
                                gx[(j, c)] += g[(i, c)];
                            }
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    if xv.rows > 0 {
                        let k = 1.0 / xv.rows as f64;
                        for r in 0..xv.rows {
                            for (o, e) in gx.row_mut(r).iter_mut().zip(&g.data) {
                                *o = k * e;
                            }
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::Broadcast(x) => {
                    let mut gx = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, e) in gx.data.iter_mut().zip(g.row(r)) {
                            *o += e;
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], id: NodeId, g: &Mat) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
