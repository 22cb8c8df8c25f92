//! Reverse-mode gradient tape over a fixed, small op set.
//!
//! Values are computed eagerly as nodes are appended; `backward` walks the
//! tape in reverse and accumulates parameter gradients into the `ParamSet`.
//! Everything is plain f64 in fixed iteration order, so a forward/backward
//! pass is bitwise reproducible.

use std::collections::BTreeMap;

use super::mat::{gemm_nn, gemm_nt, gemm_tn, Mat};
use super::params::ParamSet;
use crate::error::{Result, SlacError};

pub type NodeId = usize;

enum Op {
    Const,
    /// Leaf bound to `ParamSet.tensors[idx]`.
    Param(usize),
    /// Row lookup: out[i] = table[indices[i]].
    Gather { table: NodeId, indices: Vec<usize> },
    /// out = alpha * A' . B' where A' = a or a^T, B' = b or b^T.
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool, alpha: f64 },
    Add { a: NodeId, b: NodeId },
    /// Broadcast a 1 x n bias over the rows of a.
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    Tanh { a: NodeId },
    SoftmaxRows { a: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, from: usize, to: usize },
    Transpose { a: NodeId },
    /// 1x1: sum_i mask_i * (pred_i - target_i)^2. Masked-off entries are
    /// never read, so perturbing them cannot change the loss.
    MaskedSse { pred: NodeId, target: Vec<f64>, mask: Vec<bool> },
    /// 1x1: -log softmax(logits)[label], computed via a stable log-sum-exp.
    CrossEntropy { logits: NodeId, label: usize },
    /// Elementwise sum of same-shape nodes.
    AddN { terms: Vec<NodeId> },
}

struct Node {
    op: Op,
    val: Mat,
    rows: usize,
    cols: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: BTreeMap<usize, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, val: Mat) -> NodeId {
        let (rows, cols) = (val.rows, val.cols);
        self.nodes.push(Node { op, val, rows, cols });
        self.nodes.len() - 1
    }

    /// Steal a node's value. Only valid when no later op nor any backward
    /// rule reads it (consuming op builders uphold this).
    fn take_val(&mut self, id: NodeId) -> Mat {
        debug_assert!(!self.nodes[id].val.is_empty(), "value of node {id} already taken");
        std::mem::replace(&mut self.nodes[id].val, Mat::zeros(0, 0))
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].val
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].val.len(), 1);
        self.nodes[id].val.data[0]
    }

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(Op::Const, m)
    }

    /// Leaf for a parameter tensor; repeated calls reuse the same node.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> NodeId {
        if let Some(&id) = self.param_leaves.get(&idx) {
            return id;
        }
        let val = params.value(idx).clone();
        let id = self.push(Op::Param(idx), val);
        self.param_leaves.insert(idx, id);
        id
    }

    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        let t = &self.nodes[table].val;
        let mut out = Mat::zeros(indices.len(), t.cols);
        for (i, &r) in indices.iter().enumerate() {
            out.row_slice_mut(i).copy_from_slice(t.row_slice(r));
        }
        self.push(Op::Gather { table, indices }, out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_general(a, b, false, false, 1.0)
    }

    /// alpha * a . b^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId, alpha: f64) -> NodeId {
        self.matmul_general(a, b, false, true, alpha)
    }

    pub fn matmul_general(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool, alpha: f64) -> NodeId {
        assert!(!(ta && tb), "double-transposed matmul is not used");
        let (av, bv) = (&self.nodes[a].val, &self.nodes[b].val);
        let (m, k) = if ta { (av.cols, av.rows) } else { (av.rows, av.cols) };
        let (kb, n) = if tb { (bv.cols, bv.rows) } else { (bv.rows, bv.cols) };
        assert_eq!(k, kb, "matmul inner dimension mismatch");
        let mut out = Mat::zeros(m, n);
        match (ta, tb) {
            (false, false) => gemm_nn(alpha, av, bv, &mut out),
            (false, true) => gemm_nt(alpha, av, bv, &mut out),
            (true, false) => gemm_tn(alpha, av, bv, &mut out),
            (true, true) => unreachable!(),
        }
        self.push(Op::MatMul { a, b, ta, tb, alpha }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a].val.clone();
        out.add_in_place(&self.nodes[b].val);
        self.push(Op::Add { a, b }, out)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].val, &self.nodes[bias].val);
        assert_eq!(bv.rows, 1, "bias must be a row vector");
        assert_eq!(av.cols, bv.cols, "bias width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            let row = out.row_slice_mut(r);
            for (x, b) in row.iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        self.push(Op::AddBias { a, bias }, out)
    }

    /// `add_bias` that steals its input value (the input must have no other
    /// reader; its backward rule reads no values).
    pub fn add_bias_consuming(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let bv = self.nodes[bias].val.clone();
        assert_eq!(bv.rows, 1, "bias must be a row vector");
        let mut out = self.take_val(a);
        assert_eq!(out.cols, bv.cols, "bias width mismatch");
        for r in 0..out.rows {
            let row = out.row_slice_mut(r);
            for (x, b) in row.iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        self.push(Op::AddBias { a, bias }, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[a].val.clone();
        out.scale_in_place(c);
        self.push(Op::Scale { a, c }, out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a].val.clone();
        out.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(Op::Tanh { a }, out)
    }

    /// `tanh` that steals its input value (tanh's backward reads only the
    /// output).
    pub fn tanh_consuming(&mut self, a: NodeId) -> NodeId {
        let mut out = self.take_val(a);
        out.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(Op::Tanh { a }, out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].val;
        let mut out = av.clone();
        for r in 0..out.rows {
            super::fastexp::softmax_row(out.row_slice_mut(r));
        }
        self.push(Op::SoftmaxRows { a }, out)
    }

    /// Softmax that steals its input value (avoids cloning the n x n score
    /// matrix; softmax's backward reads only the output, and a matmul
    /// producing the scores never reads them back).
    pub fn softmax_rows_consuming(&mut self, a: NodeId) -> NodeId {
        let mut out = self.take_val(a);
        for r in 0..out.rows {
            super::fastexp::softmax_row(out.row_slice_mut(r));
        }
        self.push(Op::SoftmaxRows { a }, out)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].val, &self.nodes[b].val);
        assert_eq!(av.rows, bv.rows, "concat_cols row mismatch");
        let mut out = Mat::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            out.row_slice_mut(r)[..av.cols].copy_from_slice(av.row_slice(r));
            out.row_slice_mut(r)[av.cols..].copy_from_slice(bv.row_slice(r));
        }
        self.push(Op::ConcatCols { a, b }, out)
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let av = &self.nodes[a].val;
        assert!(from < to && to <= av.cols, "bad column slice");
        let mut out = Mat::zeros(av.rows, to - from);
        for r in 0..av.rows {
            out.row_slice_mut(r).copy_from_slice(&av.row_slice(r)[from..to]);
        }
        self.push(Op::SliceCols { a, from, to }, out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].val.transpose();
        self.push(Op::Transpose { a }, out)
    }

    pub fn masked_sse(&mut self, pred: NodeId, target: Vec<f64>, mask: Vec<bool>) -> NodeId {
        let pv = &self.nodes[pred].val;
        assert_eq!(pv.len(), target.len());
        assert_eq!(pv.len(), mask.len());
        let mut loss = 0.0;
        for i in 0..target.len() {
            if mask[i] {
                let d = pv.data[i] - target[i];
                loss += d * d;
            }
        }
        self.push(
            Op::MaskedSse { pred, target, mask },
            Mat::from_vec(1, 1, vec![loss]),
        )
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> NodeId {
        let lv = &self.nodes[logits].val;
        assert_eq!(lv.rows, 1, "logits must be a row vector");
        assert!(label < lv.cols, "label out of range");
        let max = lv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data[label];
        self.push(
            Op::CrossEntropy { logits, label },
            Mat::from_vec(1, 1, vec![loss]),
        )
    }

    pub fn add_n(&mut self, terms: Vec<NodeId>) -> NodeId {
        assert!(!terms.is_empty());
        let mut out = self.nodes[terms[0]].val.clone();
        for &t in &terms[1..] {
            out.add_in_place(&self.nodes[t].val);
        }
        self.push(Op::AddN { terms }, out)
    }

    /// Backpropagate `seed` from the scalar node `root`, accumulating
    /// parameter gradients into `params`.
    pub fn backward(&self, root: NodeId, seed: f64, params: &mut ParamSet) -> Result<()> {
        assert_eq!(self.nodes[root].val.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Mat::from_vec(1, 1, vec![seed]));

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param(idx) => {
                    params.tensors[*idx].grad.add_in_place(&g);
                }
                Op::Gather { table, indices } => {
                    let tg = self.grad_slot(&mut grads, *table);
                    for (i, &r) in indices.iter().enumerate() {
                        let src = g.row_slice(i);
                        let dst = tg.row_slice_mut(r);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul { a, b, ta, tb, alpha } => {
                    let (a, b, ta, tb, alpha) = (*a, *b, *ta, *tb, *alpha);
                    match (ta, tb) {
                        (false, false) => {
                            // C = alpha A B: dA += alpha dC B^T, dB += alpha A^T dC
                            let bv = &self.nodes[b].val;
                            gemm_nt(alpha, &g, bv, self.grad_slot(&mut grads, a));
                            let av = &self.nodes[a].val;
                            gemm_tn(alpha, av, &g, self.grad_slot(&mut grads, b));
                        }
                        (false, true) => {
                            // C = alpha A B^T: dA += alpha dC B, dB += alpha dC^T A
                            let bv = &self.nodes[b].val;
                            gemm_nn(alpha, &g, bv, self.grad_slot(&mut grads, a));
                            let av = &self.nodes[a].val;
                            gemm_tn(alpha, &g, av, self.grad_slot(&mut grads, b));
                        }
                        (true, false) => {
                            // C = alpha A^T B: dA += alpha B dC^T, dB += alpha A dC
                            let bv = &self.nodes[b].val;
                            gemm_nt(alpha, bv, &g, self.grad_slot(&mut grads, a));
                            let av = &self.nodes[a].val;
                            gemm_nn(alpha, av, &g, self.grad_slot(&mut grads, b));
                        }
                        (true, true) => unreachable!(),
                    }
                }
                Op::Add { a, b } => {
                    self.grad_slot(&mut grads, *a).add_in_place(&g);
                    self.grad_slot(&mut grads, *b).add_in_place(&g);
                }
                Op::AddBias { a, bias } => {
                    self.grad_slot(&mut grads, *a).add_in_place(&g);
                    let bg = self.grad_slot(&mut grads, *bias);
                    for r in 0..g.rows {
                        let src = g.row_slice(r);
                        for (d, s) in bg.data.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    self.grad_slot(&mut grads, *a).axpy_in_place(*c, &g);
                }
                Op::Tanh { a } => {
                    let out = &self.nodes[id].val;
                    let ag = self.grad_slot(&mut grads, *a);
                    for i in 0..g.data.len() {
                        ag.data[i] += (1.0 - out.data[i] * out.data[i]) * g.data[i];
                    }
                }
                Op::SoftmaxRows { a } => {
                    // dS = P .* (dP - rowdot(P, dP))
                    let p = &self.nodes[id].val;
                    let ag = self.grad_slot(&mut grads, *a);
                    for r in 0..p.rows {
                        let pr = p.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot = super::mat::dot(pr, gr);
                        let ar = ag.row_slice_mut(r);
                        for j in 0..pr.len() {
                            ar[j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let ac = self.nodes[*a].val.cols;
                    {
                        let ag = self.grad_slot(&mut grads, *a);
                        for r in 0..g.rows {
                            let src = &g.row_slice(r)[..ac];
                            let dst = ag.row_slice_mut(r);
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    let bg = self.grad_slot(&mut grads, *b);
                    for r in 0..g.rows {
                        let src = &g.row_slice(r)[ac..];
                        let dst = bg.row_slice_mut(r);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::SliceCols { a, from, to } => {
                    let ag = self.grad_slot(&mut grads, *a);
                    for r in 0..g.rows {
                        let src = g.row_slice(r);
                        let dst = &mut ag.row_slice_mut(r)[*from..*to];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::Transpose { a } => {
                    let ag = self.grad_slot(&mut grads, *a);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ag.data[c * g.rows + r] += g.data[r * g.cols + c];
                        }
                    }
                }
                Op::MaskedSse { pred, target, mask } => {
                    let s = g.data[0];
                    let pv = &self.nodes[*pred].val;
                    let mut dp = Mat::zeros(pv.rows, pv.cols);
                    for i in 0..target.len() {
                        if mask[i] {
                            dp.data[i] = 2.0 * (pv.data[i] - target[i]) * s;
                        }
                    }
                    self.grad_slot(&mut grads, *pred).add_in_place(&dp);
                }
                Op::CrossEntropy { logits, label } => {
                    let s = g.data[0];
                    let lv = &self.nodes[*logits].val;
                    let max = lv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = lv.data.iter().map(|x| (x - max).exp()).sum();
                    let lg = self.grad_slot(&mut grads, *logits);
                    for j in 0..lv.cols {
                        let p = (lv.data[j] - max).exp() / sum;
                        let ind = if j == *label { 1.0 } else { 0.0 };
                        lg.data[j] += (p - ind) * s;
                    }
                }
                Op::AddN { terms } => {
                    for &t in terms {
                        self.grad_slot(&mut grads, t).add_in_place(&g);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::mut_from_ref)]
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Mat>], id: NodeId) -> &'g mut Mat {
        let shape = (self.nodes[id].rows, self.nodes[id].cols);
        grads[id].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
    }
}

/// Dense layer on the tape: x . w + b.
pub fn dense(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xw = tape.matmul(x, w);
    tape.add_bias(xw, b)
}

impl Tape {
    /// Validate shapes for a dense layer before building it, mapping
    /// violations to an error instead of a panic.
    pub fn dense_checked(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols != wv.rows || bv.rows != 1 || bv.cols != wv.cols {
            return Err(SlacError::ShapeMismatch {
                op: "dense".into(),
                detail: format!(
                    "x {}x{}, w {}x{}, b {}x{}",
                    xv.rows, xv.cols, wv.rows, wv.cols, bv.rows, bv.cols
                ),
            });
        }
        Ok(dense(self, x, w, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_param(set: &mut ParamSet, name: &str, v: f64) -> usize {
        set.push(name, Mat::from_vec(1, 1, vec![v]))
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut set = ParamSet::default();
        let w = set.push("w", Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = set.push_zeros("b", 1, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Mat::row(&[3.0, -4.0]));
        let wn = tape.param(&set, w);
        let bn = tape.param(&set, b);
        let y = dense(&mut tape, x, wn, bn);
        assert_eq!(tape.value(y).data, vec![3.0, -4.0]);
    }

    #[test]
    fn one_by_one_dense_chain_rule() {
        // y = w * x + b, upstream grad g: dw = g*x, dx = g*w, db = g.
        let mut set = ParamSet::default();
        let w = scalar_param(&mut set, "w", 2.5);
        let b = scalar_param(&mut set, "b", 0.5);
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_vec(1, 1, vec![3.0]));
        let wn = tape.param(&set, w);
        let bn = tape.param(&set, b);
        let y = dense(&mut tape, x, wn, bn);
        tape.backward(y, 4.0, &mut set).unwrap();
        assert_abs_diff_eq!(set.tensors[w].grad.data[0], 4.0 * 3.0);
        assert_abs_diff_eq!(set.tensors[b].grad.data[0], 4.0);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::row(&[1.0, 1.0, 1.0, 1.0]));
        let p = tape.softmax_rows(x);
        for &v in &tape.value(p).data {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }

        let big = tape.constant(Mat::row(&[1000.0, 0.0]));
        let p2 = tape.softmax_rows(big);
        let v = tape.value(p2);
        assert!(v.all_finite());
        assert_abs_diff_eq!(v.data[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.data[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.data.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn masked_sse_hand_cases() {
        let mut tape = Tape::new();
        let pred = tape.constant(Mat::row(&[3.0, 7.0]));
        // all masks off -> 0
        let l0 = tape.masked_sse(pred, vec![0.0, 0.0], vec![false, false]);
        assert_eq!(tape.scalar(l0), 0.0);
        // one masked-on with error 2 -> 4
        let l1 = tape.masked_sse(pred, vec![1.0, 0.0], vec![true, false]);
        assert_eq!(tape.scalar(l1), 4.0);
    }

    #[test]
    fn masked_off_entries_are_bit_inert() {
        let target = vec![1.0, 2.0];
        let mask = vec![true, false];
        let mut t1 = Tape::new();
        let p1 = t1.constant(Mat::row(&[0.5, 100.0]));
        let a = t1.masked_sse(p1, target.clone(), mask.clone());
        let mut t2 = Tape::new();
        let p2 = t2.constant(Mat::row(&[0.5, -3.0e17]));
        let b = t2.masked_sse(p2, target, mask);
        assert_eq!(t1.scalar(a).to_bits(), t2.scalar(b).to_bits());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Mat::row(&[0.0; 5]));
        let l = tape.cross_entropy(logits, 2);
        assert_abs_diff_eq!(tape.scalar(l), (5.0f64).ln(), epsilon = 1e-15);
    }

    #[test]
    fn gather_scatters_gradient_to_rows() {
        let mut set = ParamSet::default();
        let table = set.push("t", Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut tape = Tape::new();
        let tn = tape.param(&set, table);
        let g = tape.gather(tn, vec![2, 0, 2]);
        assert_eq!(tape.value(g).data, vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        // loss = sum of squared gathered entries
        let l = tape.masked_sse(g, vec![0.0; 6], vec![true; 6]);
        tape.backward(l, 1.0, &mut set).unwrap();
        // d/dx sum x^2 = 2x; row 2 hit twice.
        assert_eq!(set.tensors[table].grad.data, vec![2.0, 4.0, 0.0, 0.0, 20.0, 24.0]);
    }

    #[test]
    fn dense_checked_rejects_mismatch() {
        let mut set = ParamSet::default();
        let w = set.push_zeros("w", 3, 2);
        let b = set.push_zeros("b", 1, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Mat::row(&[1.0, 2.0])); // width 2, needs 3
        let wn = tape.param(&set, w);
        let bn = tape.param(&set, b);
        assert!(tape.dense_checked(x, wn, bn).is_err());
    }
}
