//! Reverse-mode automatic differentiation over a tape of matrix ops.
//!
//! A [`Graph`] is built once per document forward pass. Parameter leaves
//! borrow from the [`ParamStore`]; their gradients go straight into a
//! [`ParamGrads`] buffer during [`Graph::backward`]. Frozen parameters never
//! receive gradient and sub-graphs that only depend on frozen parameters are
//! skipped.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{axpy, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Const,
    Param(ParamId),
    Gather { table: ParamId, rows: Vec<usize> },
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Mat, inv_std: Vec<f64> },
    Softmax { x: NodeId },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Row { x: NodeId, row: usize },
    MaxRows { x: NodeId, argmax: Vec<usize> },
    Mul { x: NodeId, mask: Vec<f64> },
    SmoothedCe { logits: NodeId, probs: Vec<f64>, target: Vec<f64> },
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// `track = false` builds an inference-only graph (nothing needs grad).
    pub fn new(store: &'p ParamStore, track: bool) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            track,
        }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        match &self.nodes[id.0].op {
            Op::Param(p) => self.store.value(*p),
            _ => self.nodes[id.0].value.as_ref().unwrap(),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad: needs_grad && self.track,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Const, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let needs = self.store.get(id).trainable && self.track;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: needs,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Rows of an embedding table.
    pub fn gather(&mut self, table: ParamId, rows: &[usize]) -> NodeId {
        let t = self.store.value(table);
        let mut out = Mat::zeros(rows.len(), t.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        let needs = self.store.get(table).trainable;
        self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), needs)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulBT(a, b), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((1, v.cols), b.shape(), "bias shape");
        for i in 0..v.rows {
            for (x, y) in v.row_mut(i).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(v, Op::AddBias(a, bias), needs)
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        let needs = self.needs(a);
        self.push(v, Op::Scale(a, s), needs)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            let t = (GELU_C * (*x + 0.044715 * *x * *x * *x)).tanh();
            *x = 0.5 * *x * (1.0 + t);
        }
        let needs = self.needs(a);
        self.push(v, Op::Gelu(a), needs)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×n`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> NodeId {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = input.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, gv), bv) in out.row_mut(i).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gv + bv;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Row-wise softmax over the columns with `keep[j] = true`; excluded
    /// columns get probability exactly zero. At least one column must be kept.
    pub fn masked_softmax(&mut self, x: NodeId, keep: &[bool]) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(keep.len(), v.cols);
        assert!(keep.iter().any(|k| *k), "softmax over zero columns");
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (x, k) in row.iter_mut().zip(keep) {
                *x = if *k { (*x - max).exp() } else { 0.0 };
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let needs = self.needs(x);
        self.push(v, Op::Softmax { x }, needs)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let input = self.value(x);
        let mut out = Mat::zeros(input.rows, len);
        for i in 0..input.rows {
            out.row_mut(i).copy_from_slice(&input.row(i)[start..start + len]);
        }
        let needs = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + m.cols].copy_from_slice(m.row(i));
            }
            offset += m.cols;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols);
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(Mat::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()), needs)
    }

    pub fn row(&mut self, x: NodeId, row: usize) -> NodeId {
        let m = self.value(x);
        let out = Mat::from_vec(1, m.cols, m.row(row).to_vec());
        let needs = self.needs(x);
        self.push(out, Op::Row { x, row }, needs)
    }

    /// Column-wise max over the rows with `keep[i] = true`.
    pub fn masked_max_rows(&mut self, x: NodeId, keep: &[bool]) -> NodeId {
        let m = self.value(x);
        assert_eq!(keep.len(), m.rows);
        let first = keep.iter().position(|k| *k).expect("max over zero rows");
        let mut out = Mat::from_vec(1, m.cols, m.row(first).to_vec());
        let mut argmax = vec![first; m.cols];
        // NaN wins so that a non-finite activation reaches the loss.
        for i in (first + 1..m.rows).filter(|i| keep[*i]) {
            for (j, v) in m.row(i).iter().enumerate() {
                if *v > out.data[j] || (v.is_nan() && !out.data[j].is_nan()) {
                    out.data[j] = *v;
                    argmax[j] = i;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::MaxRows { x, argmax }, needs)
    }

    /// Element-wise product with a fixed mask (used for dropout).
    pub fn mul_mask(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(mask.len(), v.len());
        for (a, m) in v.data.iter_mut().zip(&mask) {
            *a *= m;
        }
        let needs = self.needs(x);
        self.push(v, Op::Mul { x, mask }, needs)
    }

    /// Cross-entropy of a `1×C` logit row against the soft target `target`.
    pub fn soft_cross_entropy(&mut self, logits: NodeId, target: Vec<f64>) -> NodeId {
        let l = self.value(logits);
        assert_eq!((1, target.len()), l.shape());
        let log_probs = log_softmax(&l.data);
        let loss: f64 = -target.iter().zip(&log_probs).map(|(q, lp)| q * lp).sum::<f64>();
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        let needs = self.needs(logits);
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::SmoothedCe {
                logits,
                probs,
                target,
            },
            needs,
        )
    }

    /// Back-propagates d(`root`)/d(·) = 1 and accumulates parameter
    /// gradients into `grads`, scaled by `scale`.
    pub fn backward(&self, root: NodeId, scale: f64, grads: &mut ParamGrads) {
        let mut node_grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(root).shape();
        node_grads[root.0] = Some(Mat::from_vec(shape.0, shape.1, vec![scale; shape.0 * shape.1]));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = node_grads[idx].take() else { continue };
            self.backward_node(node, g, &mut node_grads, grads);
        }
    }

    fn accumulate(&self, target: NodeId, g: Mat, node_grads: &mut [Option<Mat>], grads: &mut ParamGrads) {
        if !self.needs(target) {
            return;
        }
        if let Op::Param(p) = self.nodes[target.0].op {
            grads.slot(p, g.shape()).add_assign(&g);
            return;
        }
        match &mut node_grads[target.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: Mat, ng: &mut [Option<Mat>], grads: &mut ParamGrads) {
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::Gather { table, rows } => {
                let t = self.store.value(*table);
                let slot = grads.slot(*table, t.shape());
                for (i, &r) in rows.iter().enumerate() {
                    axpy(1.0, g.row(i), slot.row_mut(r));
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = g.matmul_bt(self.value(*b));
                    self.accumulate(*a, da, ng, grads);
                }
                if self.needs(*b) {
                    let db = self.value(*a).matmul_at(&g);
                    self.accumulate(*b, db, ng, grads);
                }
            }
            Op::MatMulBT(a, b) => {
                // out = a · bᵀ: da = g · b, db = gᵀ · a
                if self.needs(*a) {
                    let da = g.matmul(self.value(*b));
                    self.accumulate(*a, da, ng, grads);
                }
                if self.needs(*b) {
                    let db = g.matmul_at(self.value(*a));
                    self.accumulate(*b, db, ng, grads);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accumulate(*b, g.clone(), ng, grads);
                }
                self.accumulate(*a, g, ng, grads);
            }
            Op::AddBias(a, bias) => {
                if self.needs(*bias) {
                    let mut db = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        axpy(1.0, g.row(i), &mut db.data);
                    }
                    self.accumulate(*bias, db, ng, grads);
                }
                self.accumulate(*a, g, ng, grads);
            }
            Op::Scale(a, s) => {
                let mut g = g;
                g.scale_assign(*s);
                self.accumulate(*a, g, ng, grads);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut g = g;
                for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                    let inner = GELU_C * (xv + 0.044715 * xv * xv * xv);
                    let t = inner.tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * xv * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                    *gv *= d;
                }
                self.accumulate(*a, g, ng, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let cols = g.cols;
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for i in 0..g.rows {
                        for ((j, gv), xh) in g.row(i).iter().enumerate().zip(xhat.row(i)) {
                            dg.data[j] += gv * xh;
                            db.data[j] += gv;
                        }
                    }
                    self.accumulate(*gamma, dg, ng, grads);
                    self.accumulate(*beta, db, ng, grads);
                }
                if self.needs(*x) {
                    let mut dx = Mat::zeros(g.rows, cols);
                    for i in 0..g.rows {
                        let xh = xhat.row(i);
                        let dxhat: Vec<f64> =
                            g.row(i).iter().zip(&gam.data).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>()
                            / cols as f64;
                        for ((o, d), h) in dx.row_mut(i).iter_mut().zip(&dxhat).zip(xh) {
                            *o = inv_std[i] * (d - mean_d - h * mean_dx);
                        }
                    }
                    self.accumulate(*x, dx, ng, grads);
                }
            }
            Op::Softmax { x } => {
                let p = node.value.as_ref().unwrap();
                let mut dx = Mat::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let pr = p.row(i);
                    let gr = g.row(i);
                    let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, pv), gv) in dx.row_mut(i).iter_mut().zip(pr).zip(gr) {
                        *o = pv * (gv - inner);
                    }
                }
                self.accumulate(*x, dx, ng, grads);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut dx = Mat::zeros(src.rows, src.cols);
                for i in 0..g.rows {
                    dx.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(*x, dx, ng, grads);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.needs(*p) {
                        let mut dp = Mat::zeros(g.rows, cols);
                        for i in 0..g.rows {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        self.accumulate(*p, dp, ng, grads);
                    }
                    offset += cols;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows;
                    if self.needs(*p) {
                        let data = g.data[offset * g.cols..(offset + rows) * g.cols].to_vec();
                        self.accumulate(*p, Mat::from_vec(rows, g.cols, data), ng, grads);
                    }
                    offset += rows;
                }
            }
            Op::Row { x, row } => {
                let src = self.value(*x);
                let mut dx = Mat::zeros(src.rows, src.cols);
                dx.row_mut(*row).copy_from_slice(&g.data);
                self.accumulate(*x, dx, ng, grads);
            }
            Op::MaxRows { x, argmax } => {
                let src = self.value(*x);
                let mut dx = Mat::zeros(src.rows, src.cols);
                for (j, &i) in argmax.iter().enumerate() {
                    dx.data[i * src.cols + j] += g.data[j];
                }
                self.accumulate(*x, dx, ng, grads);
            }
            Op::Mul { x, mask } => {
                let mut g = g;
                for (a, m) in g.data.iter_mut().zip(mask) {
                    *a *= m;
                }
                self.accumulate(*x, g, ng, grads);
            }
            Op::SmoothedCe {
                logits,
                probs,
                target,
            } => {
                let s = g.data[0];
                let d = probs.iter().zip(target).map(|(p, q)| s * (p - q)).collect();
                self.accumulate(*logits, Mat::from_vec(1, probs.len(), d), ng, grads);
            }
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}
