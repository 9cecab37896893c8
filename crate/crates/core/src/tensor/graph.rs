use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Geometry of a batched multi-head attention call.
///
/// Queries are laid out as `[batch * q_len, d]`, keys and values as
/// `[batch * k_len, d]`. `key_valid` has one flag per key row; masked keys
/// receive zero probability.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    BroadcastAdd {
        h: NodeId,
        v: NodeId,
    },
    AddRows {
        h: NodeId,
        table: NodeId,
        rows: Vec<Option<usize>>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        smoothing: f64,
        pad: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Gradients of leaf parameters produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    /// One slot per parameter, in store order.
    pub fn new(grads: Vec<Option<Vec<f64>>>) -> Self {
        ParamGrads { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Result of a backward pass: gradients for variables and parameters.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::variable`] or [`Graph::param`].
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

/// Computation tape. Ops are recorded in execution order, so node ids are a
/// topological order and the backward pass simply walks them in reverse.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match &self.nodes[id.0].value {
            Value::Owned(v) => v,
            Value::Param(p) => self.params.expect("param node without store").tensor(*p).data(),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node shape is valid")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|x| x.is_finite()), "non-finite op output");
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn rows_of(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape(id);
        let d = *s.last().unwrap_or(&1);
        (self.value(id).len() / d.max(1), d)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    /// Leaf that receives gradients, readable through [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf, true)
    }

    /// Leaf referencing a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let shape = self
            .params
            .expect("graph built without a parameter store")
            .tensor(id)
            .shape()
            .to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (rows, k) = self.rows_of(x);
        let sw = self.shape(w);
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::Shape(format!("linear input width {k} vs weight {sw:?}")));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::Shape(format!("linear bias {:?} vs width {n}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = self.value(b);
            out.chunks_exact_mut(n).for_each(|r| r.copy_from_slice(bv));
        }
        gemm(
            rows,
            k,
            n,
            self.value(x),
            false,
            self.value(w),
            false,
            &mut out,
            b.is_some(),
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(shape, out, Op::Linear { x, w, b }, ng))
    }

    /// Gathers rows of `table` (`[V, d]`) -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::Shape(format!("embedding table {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!("embedding id {bad} >= {v}")));
        }
        if ids.is_empty() {
            return Err(Error::Shape("embedding of zero ids".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// `h[n, d] + v[d]`, broadcast along the token axis.
    pub fn broadcast_add(&mut self, h: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, d) = self.rows_of(h);
        if self.shape(v) != [d] {
            return Err(Error::Shape(format!(
                "broadcast_add {:?} + {:?}",
                self.shape(h),
                self.shape(v)
            )));
        }
        let vv = self.value(v);
        let out = self
            .value(h)
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(vv).map(|(a, b)| a + b))
            .collect();
        let ng = self.ng(h) || self.ng(v);
        Ok(self.push(self.shape(h).to_vec(), out, Op::BroadcastAdd { h, v }, ng))
    }

    /// Adds `table[rows[i]]` to row `i` of `h`; rows mapped to `None` pass through untouched.
    pub fn add_rows(&mut self, h: NodeId, table: NodeId, rows: &[Option<usize>]) -> Result<NodeId> {
        let (n, d) = self.rows_of(h);
        let st = self.shape(table);
        if st.len() != 2 || st[1] != d || rows.len() != n {
            return Err(Error::Shape(format!(
                "add_rows {:?} with table {st:?} and {} row indices",
                self.shape(h),
                rows.len()
            )));
        }
        if let Some(bad) = rows.iter().flatten().find(|&&r| r >= st[0]) {
            return Err(Error::Shape(format!("table row {bad} >= {}", st[0])));
        }
        let tv = self.value(table);
        let mut out = self.value(h).to_vec();
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                let src = &tv[r * d..(r + 1) * d];
                out[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(o, s)| *o += s);
            }
        }
        let ng = self.ng(h) || self.ng(table);
        Ok(self.push(
            self.shape(h).to_vec(),
            out,
            Op::AddRows {
                h,
                table,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Normalizes each row over the last axis (population variance), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, d) = self.rows_of(x);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm width {d} with gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = var + eps;
            let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, ng))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, ng)
    }

    /// Scaled dot-product attention over `layout.heads` heads.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, layout: AttentionLayout) -> Result<NodeId> {
        let (qr, d) = self.rows_of(q);
        let (kr, dk) = self.rows_of(k);
        let (vr, dv) = self.rows_of(v);
        let AttentionLayout {
            batch: b,
            q_len: tq,
            k_len: tk,
            heads: h,
            ..
        } = layout;
        if qr != b * tq || kr != b * tk || vr != kr || dk != d || dv != d || h == 0 || d % h != 0 {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} for batch {b}, lengths {tq}/{tk}, {h} heads",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if layout.key_valid.len() != kr || (layout.causal && tq != tk) {
            return Err(Error::Shape("attention mask does not match keys".into()));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; b * h * tq * tk];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; tk];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..tq {
                    let qrow = &qv[(bi * tq + i) * d + hi * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if !layout.key_valid[bi * tk + j] || (layout.causal && j > i) {
                            scores[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &kv[(bi * tk + j) * d + hi * dh..][..dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    if max == f64::NEG_INFINITY {
                        // no visible key: output stays zero
                        continue;
                    }
                    let p = &mut probs[((bi * h + hi) * tq + i) * tk..][..tk];
                    let mut z = 0.0;
                    for j in 0..tk {
                        let e = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        p[j] = e;
                        z += e;
                    }
                    let orow = &mut out[(bi * tq + i) * d + hi * dh..][..dh];
                    for j in 0..tk {
                        p[j] /= z;
                        if p[j] != 0.0 {
                            let vrow = &vv[(bi * tk + j) * d + hi * dh..][..dh];
                            axpy(p[j], vrow, orow);
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            self.shape(q).to_vec(),
            out,
            Op::Attention { q, k, v, layout, probs },
            ng,
        ))
    }

    /// Label-smoothed cross-entropy, averaged over positions whose target is not `pad`.
    ///
    /// Per position: `(1 - smoothing) * NLL(target) + smoothing * mean_v NLL(v)`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], smoothing: f64, pad: usize) -> Result<NodeId> {
        let (n, vocab) = self.rows_of(logits);
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} not in [0, 1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Shape(format!("target {bad} >= vocabulary {vocab}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= z);
            let lse = max + z.ln();
            let mean_logit = row.iter().sum::<f64>() / vocab as f64;
            total += (1.0 - smoothing) * (lse - row[t]) + smoothing * (lse - mean_logit);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                pad,
                probs,
                count,
            },
            ng,
        ))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut param_grads = ParamGrads {
            grads: vec![None; self.param_nodes.len()],
        };
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match (&node.op, &node.value) {
                (Op::Leaf, Value::Param(p)) => param_grads.grads[p.0] = Some(g),
                (Op::Leaf, Value::Owned(_)) => leaf_grads[i] = Some(g),
                _ => self.backprop(NodeId(i), &g, &mut grads),
            }
        }
        Ok(Gradients {
            nodes: leaf_grads,
            params: param_grads,
        })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let len = self.value(id).len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id.0];
        let out = self.value(id);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if let Some(buf) = self.grad_buf(grads, x) {
                        add_into(buf, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(buf) = self.grad_buf(grads, *a) {
                    buf.iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (g, b))| *o += g * b);
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    buf.iter_mut().zip(g.iter().zip(av)).for_each(|(o, (g, a))| *o += g * a);
                }
            }
            Op::Scale(x, s) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(o, g)| *o += s * g);
                }
            }
            Op::Relu(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((o, g), y) in buf.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *o += g;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(buf) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g, false, bv, true, buf, true);
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    gemm(k, m, n, av, true, g, false, buf, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, k) = self.rows_of(*x);
                let n = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(buf) = self.grad_buf(grads, *x) {
                    gemm(rows, n, k, g, false, wv, true, buf, true);
                }
                if let Some(buf) = self.grad_buf(grads, *w) {
                    gemm(k, rows, n, xv, true, g, false, buf, true);
                }
                if let Some(b) = b {
                    if let Some(buf) = self.grad_buf(grads, *b) {
                        for row in g.chunks_exact(n) {
                            add_into(buf, row);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(buf) = self.grad_buf(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut buf[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::BroadcastAdd { h, v } => {
                let d = self.shape(*v)[0];
                if let Some(buf) = self.grad_buf(grads, *h) {
                    add_into(buf, g);
                }
                if let Some(buf) = self.grad_buf(grads, *v) {
                    for row in g.chunks_exact(d) {
                        add_into(buf, row);
                    }
                }
            }
            Op::AddRows { h, table, rows } => {
                let d = self.shape(*table)[1];
                if let Some(buf) = self.grad_buf(grads, *h) {
                    add_into(buf, g);
                }
                if let Some(buf) = self.grad_buf(grads, *table) {
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            add_into(&mut buf[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, d) = self.rows_of(*x);
                let gv = self.value(*gain);
                if let Some(buf) = self.grad_buf(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *bias) {
                    for row in g.chunks_exact(d) {
                        add_into(buf, row);
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dx = 0.0;
                        let mut mean_dx_x = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            mean_dx += dxhat[j];
                            mean_dx_x += dxhat[j] * xr[j];
                        }
                        mean_dx /= d as f64;
                        mean_dx_x /= d as f64;
                        for j in 0..d {
                            buf[r * d + j] += rstd[r] * (dxhat[j] - mean_dx - xr[j] * mean_dx_x);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    let (outer, n, inner) = axis_split(&node.shape, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dotp: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..n {
                                buf[at(j)] += out[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut()
                        .zip(g.iter().zip(mask))
                        .for_each(|(o, (g, m))| *o += g * m);
                }
            }
            Op::Attention { q, k, v, layout, probs } => self.attention_backward(*q, *k, *v, layout, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                pad,
                probs,
                count,
            } => {
                let vocab = *self.shape(*logits).last().expect("2-d logits");
                if let Some(buf) = self.grad_buf(grads, *logits) {
                    let scale = g[0] / *count as f64;
                    let uniform = smoothing / vocab as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let b = &mut buf[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            b[j] += scale * (p[j] - uniform);
                        }
                        b[t] -= scale * (1.0 - smoothing);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (_, d) = self.rows_of(q);
        let (b, tq, tk, h) = (layout.batch, layout.q_len, layout.k_len, layout.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; tk];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..tq {
                    let p = &probs[((bi * h + hi) * tq + i) * tk..][..tk];
                    let go = &g[(bi * tq + i) * d + hi * dh..][..dh];
                    let mut weighted = 0.0;
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let off = (bi * tk + j) * d + hi * dh;
                        dp[j] = dot(go, &vv[off..off + dh]);
                        weighted += p[j] * dp[j];
                        axpy(p[j], go, &mut dv[off..off + dh]);
                    }
                    let qoff = (bi * tq + i) * d + hi * dh;
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        let koff = (bi * tk + j) * d + hi * dh;
                        axpy(ds, &kv[koff..koff + dh], &mut dq[qoff..qoff + dh]);
                        axpy(ds, &qv[qoff..qoff + dh], &mut dk[koff..koff + dh]);
                    }
                }
            }
        }
        for (id, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = self.grad_buf(grads, id) {
                add_into(buf, &local);
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c[m, n] (+)= op(a)[m, k] · op(b)[k, n]`.
///
/// With `ta` set, `a` is stored as `[k, m]`; with `tb` set, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every index the kernel touches for
    // the given dimensions and strides; the slices do not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
