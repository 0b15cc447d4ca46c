//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Only the operations the encoder-decoder needs are provided. Attention and
//! the label-smoothed cross-entropy are fused ops with hand-written
//! backward passes.

use super::tensor::{gemm, Matrix};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a fused multi-head attention call. Query rows are
/// `b * q_len + i`, key/value rows `b * k_len + j`.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * k_len` flags; false marks padding keys.
    pub key_valid: Vec<bool>,
}

impl AttnLayout {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
        scale: f64,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        probs: Matrix,
        count: usize,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, cb) = (self.value(a).rows(), self.value(b).cols());
        let mut out = Matrix::zeros(ra, cb);
        gemm(1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), out.cols());
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Rows `ids` of `table`, each multiplied by `scale`.
    pub fn gather(&mut self, table: Var, ids: &[usize], scale: f64) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            for (o, v) in out.row_mut(r).iter_mut().zip(t.row(id)) {
                *o = v * scale;
            }
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                scale,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    /// `mask` holds 0 for dropped entries and `1 / (1 - p)` for kept ones.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(mask.len(), out.data().len());
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (out, xhat, inv_std) =
            layer_norm_forward(self.value(x), self.value(gain).data(), self.value(bias).data());
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), &layout);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        )
    }

    /// Mean label-smoothed cross-entropy over rows with a target; a 1x1
    /// value. With no targets at all the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len());
        let vocab = z.cols();
        let mut probs = Matrix::zeros(z.rows(), vocab);
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(y) = *t else { continue };
            let row = z.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = probs.row_mut(r);
            let mut sum = 0.0;
            for (p, &zv) in out.iter_mut().zip(row) {
                *p = (zv - m).exp();
                sum += *p;
            }
            let lse = m + sum.ln();
            let inv = 1.0 / sum;
            out.iter_mut().for_each(|p| *p *= inv);
            let sum_logp = row.iter().sum::<f64>() - vocab as f64 * lse;
            let logp_y = row[y] - lse;
            total += -(1.0 - smoothing) * logp_y - smoothing / vocab as f64 * sum_logp;
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
                count,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Vec<Option<Matrix>> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], v: Var, m: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                gemm(1.0, g, false, bv, true, 0.0, &mut ga);
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                gemm(1.0, av, true, g, false, 0.0, &mut gb);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Gather { table, ids, scale } => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v * scale;
                    }
                }
                acc(grads, *table, gt);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if *v <= 0.0 {
                        *o = 0.0;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                for (o, m) in gx.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = g.cols();
                let mut gx = Matrix::zeros(g.rows(), d);
                let mut ggain = Matrix::zeros(1, d);
                let mut gbias = Matrix::zeros(1, d);
                let mut dxhat = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate().take(g.rows()) {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..d {
                        dxhat[c] = gr[c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xr[c];
                        ggain.data_mut()[c] += gr[c] * xr[c];
                        gbias.data_mut()[c] += gr[c];
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    let out = gx.row_mut(r);
                    for c in 0..d {
                        out[c] = inv * (dxhat[c] - mean_d - xr[c] * mean_dx);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gain, ggain);
                acc(grads, *bias, gbias);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (gq, gk, gv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), layout, probs, g);
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
                count,
            } => {
                let vocab = probs.cols();
                let mut gz = Matrix::zeros(probs.rows(), vocab);
                if *count > 0 {
                    let upstream = g.get(0, 0) / *count as f64;
                    let uniform = smoothing / vocab as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(y) = *t else { continue };
                        let p = probs.row(r);
                        let out = gz.row_mut(r);
                        for c in 0..vocab {
                            let target = uniform + if c == y { 1.0 - smoothing } else { 0.0 };
                            out[c] = upstream * (p[c] - target);
                        }
                    }
                }
                acc(grads, *logits, gz);
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64], xhat: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for c in 0..x.len() {
        xhat[c] = (x[c] - mean) * inv;
        out[c] = gain[c] * xhat[c] + bias[c];
    }
    inv
}

fn layer_norm_forward(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let inv = layer_norm_row(x.row(r), gain, bias, out.row_mut(r), xhat.row_mut(r));
        inv_std.push(inv);
    }
    (out, xhat, inv_std)
}

/// Softmax over `scores[j]` for allowed `j`, written back in place; returns
/// false when nothing is allowed (the row is zeroed).
pub(crate) fn masked_softmax(scores: &mut [f64], allowed: impl Fn(usize) -> bool) -> bool {
    let mut m = f64::NEG_INFINITY;
    for (j, s) in scores.iter().enumerate() {
        if allowed(j) && *s > m {
            m = *s;
        }
    }
    if m == f64::NEG_INFINITY {
        scores.iter_mut().for_each(|s| *s = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for (j, s) in scores.iter_mut().enumerate() {
        if allowed(j) {
            *s = (*s - m).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
    true
}

fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, layout: &AttnLayout) -> (Matrix, Vec<f64>) {
    let d = q.cols();
    let dh = d / layout.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (tq, tk) = (layout.q_len, layout.k_len);
    let mut out = Matrix::zeros(q.rows(), d);
    let mut probs = vec![0.0; layout.batch * layout.heads * tq * tk];
    for b in 0..layout.batch {
        for h in 0..layout.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let qi = &q.row(b * tq + i)[cols.clone()];
                let base = ((b * layout.heads + h) * tq + i) * tk;
                let p = &mut probs[base..base + tk];
                for (j, pj) in p.iter_mut().enumerate() {
                    if layout.allowed(b, i, j) {
                        let kj = &k.row(b * tk + j)[cols.clone()];
                        *pj = dot(qi, kj) * scale;
                    }
                }
                masked_softmax(p, |j| layout.allowed(b, i, j));
                let o = &mut out.row_mut(b * tq + i)[cols.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    if pj != 0.0 {
                        let vj = &v.row(b * tk + j)[cols.clone()];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += pj * vc;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &AttnLayout,
    probs: &[f64],
    g: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let dh = d / layout.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (tq, tk) = (layout.q_len, layout.k_len);
    let mut gq = Matrix::zeros(q.rows(), d);
    let mut gk = Matrix::zeros(k.rows(), d);
    let mut gv = Matrix::zeros(v.rows(), d);
    let mut dp = vec![0.0; tk];
    for b in 0..layout.batch {
        for h in 0..layout.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let base = ((b * layout.heads + h) * tq + i) * tk;
                let p = &probs[base..base + tk];
                let go = &g.row(b * tq + i)[cols.clone()];
                let mut weighted = 0.0;
                for j in 0..tk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &v.row(b * tk + j)[cols.clone()];
                    dp[j] = dot(go, vj);
                    weighted += p[j] * dp[j];
                    let gvj = &mut gv.row_mut(b * tk + j)[cols.clone()];
                    for (o, gc) in gvj.iter_mut().zip(go) {
                        *o += p[j] * gc;
                    }
                }
                let qi = &q.row(b * tq + i)[cols.clone()];
                for j in 0..tk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k.row(b * tk + j)[cols.clone()];
                    let gqi = &mut gq.row_mut(b * tq + i)[cols.clone()];
                    for (o, kc) in gqi.iter_mut().zip(kj) {
                        *o += ds * kc;
                    }
                    let gkj = &mut gk.row_mut(b * tk + j)[cols.clone()];
                    for (o, qc) in gkj.iter_mut().zip(qi) {
                        *o += ds * qc;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
