//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward ops append nodes eagerly (f32); `backward` replays the recording
//! in reverse and accumulates gradients; `apply_grads` exports leaf gradients
//! into the owning [`ParamStore`]. The same recorded graph can be re-evaluated
//! in f64 (`eval_f64`), which is what the finite-difference oracle uses as an
//! independent high-precision reference.

use super::linalg::{dot, gemm_nn, gemm_nt, gemm_tn, Scalar};
use super::tensor::{ParamId, ParamStore, Tensor};
use super::NumericsError;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A * B
    MatMul { a: usize, b: usize },
    /// C = A * B^T
    MatMulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// Row-broadcast bias add: X[n,d] + bias[d].
    AddBias { x: usize, bias: usize },
    Scale { x: usize, c: f32 },
    Relu { x: usize },
    Tanh { x: usize },
    /// Per-row normalization with affine gain/bias.
    LayerNorm { x: usize, gain: usize, bias: usize },
    /// Scaled lower-triangular attention logits per window; with multiple
    /// heads each output row holds `heads` concatenated length-`len` blocks.
    AttnScores { q: usize, k: usize, batch: usize, len: usize, dim: usize, heads: usize },
    /// Row-wise softmax over the allowed (j <= i) positions of each head
    /// block; masked entries stay exactly zero.
    SoftmaxCausal { scores: usize, batch: usize, len: usize, heads: usize },
    /// Probability-weighted sum of value rows per window and head.
    AttnContext { probs: usize, v: usize, batch: usize, len: usize, dim: usize, heads: usize },
    /// out[i, :] = x[indices[i], :]
    GatherRows { x: usize, indices: Vec<usize> },
    /// Interleaves rows of three equal-shape inputs in groups of `group`
    /// rows: (a_t, b_t, c_t) triples within each group.
    Interleave3 { a: usize, b: usize, c: usize, group: usize },
    /// Row-weighted mean squared error against a constant target.
    MseMasked { pred: usize, target: usize, weights: Vec<f32> },
    Sum { x: usize },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Option<Vec<f32>>,
    op: Op,
    needs_grad: bool,
    source: Option<ParamId>,
}

/// Recorded computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYERNORM_EPS: f32 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Value) -> &[f32] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Value) -> f32 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of a node after `backward`; `None` if the node was not
    /// reached or does not require gradients.
    pub fn grad(&self, v: Value) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Value {
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            needs_grad,
            source: None,
        });
        Value(self.nodes.len() - 1)
    }

    /// Constant leaf: participates in forward only.
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Differentiable leaf that is not store-backed (used by gradient checks).
    pub fn input(&mut self, t: &Tensor) -> Value {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf backed by a stored parameter; gradients flow unless the
    /// parameter is frozen.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Value {
        let t = store.value(id);
        let needs = t.requires_grad() && !store.is_frozen(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, needs);
        self.nodes[v.0].source = Some(id);
        v
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn eval_here(&self, op: &Op) -> Vec<f32> {
        eval_op(op, |i| self.nodes[i].value.as_slice(), |i| &self.nodes[i].shape)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let op = Op::MatMul { a: a.0, b: b.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(vec![sa[0], sb[1]], value, op, needs))
    }

    /// C = A * B^T for row-major B stored as [n, k].
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Result<Value, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(NumericsError::ShapeMismatch { op: "matmul_nt", lhs: sa, rhs: sb });
        }
        let op = Op::MatMulNt { a: a.0, b: b.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(vec![sa[0], sb[0]], value, op, needs))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let op = Op::Add { a: a.0, b: b.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(sa, value, op, needs))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch { op: "sub", lhs: sa, rhs: sb });
        }
        let op = Op::Sub { a: a.0, b: b.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(sa, value, op, needs))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let op = Op::Mul { a: a.0, b: b.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(sa, value, op, needs))
    }

    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value, NumericsError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(NumericsError::ShapeMismatch { op: "add_bias", lhs: sx, rhs: sb });
        }
        let op = Op::AddBias { x: x.0, bias: bias.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[x.0, bias.0]);
        Ok(self.push(sx, value, op, needs))
    }

    pub fn scale(&mut self, x: Value, c: f32) -> Value {
        let op = Op::Scale { x: x.0, c };
        let value = self.eval_here(&op);
        let needs = self.needs(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op, needs)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let op = Op::Relu { x: x.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op, needs)
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        let op = Op::Tanh { x: x.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op, needs)
    }

    /// Per-row normalization to zero mean / unit variance (epsilon 1e-5),
    /// then elementwise affine with `gain` and `bias`.
    pub fn layernorm(&mut self, x: Value, gain: Value, bias: Value) -> Result<Value, NumericsError> {
        let (sx, sg, sb) = (
            self.shape(x).to_vec(),
            self.shape(gain).to_vec(),
            self.shape(bias).to_vec(),
        );
        if sx.len() != 2 || sg != vec![sx[1]] || sb != vec![sx[1]] {
            return Err(NumericsError::ShapeMismatch { op: "layernorm", lhs: sx, rhs: sg });
        }
        let op = Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(sx, value, op, needs))
    }

    /// Lower-triangular scaled dot-product logits for `batch` windows of
    /// `len` rows each, split over `heads` channel groups; entries above the
    /// diagonal are exactly zero and do not contribute gradients.
    pub fn attn_scores(&mut self, q: Value, k: Value, batch: usize, len: usize, heads: usize) -> Result<Value, NumericsError> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq != sk || sq.len() != 2 || sq[0] != batch * len || heads == 0 || sq[1] % heads != 0 {
            return Err(NumericsError::ShapeMismatch { op: "attn_scores", lhs: sq, rhs: sk });
        }
        let dim = sq[1];
        let op = Op::AttnScores { q: q.0, k: k.0, batch, len, dim, heads };
        let value = self.eval_here(&op);
        let needs = self.needs(&[q.0, k.0]);
        Ok(self.push(vec![batch * len, heads * len], value, op, needs))
    }

    /// Causal softmax of a single square score matrix.
    pub fn softmax_causal(&mut self, scores: Value) -> Result<Value, NumericsError> {
        let s = self.shape(scores).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(NumericsError::ShapeMismatch { op: "softmax_causal", lhs: s.clone(), rhs: s });
        }
        let len = s[0];
        self.softmax_causal_batched(scores, 1, len, 1)
    }

    /// Causal softmax over `batch` stacked score blocks of `len` rows, each
    /// row holding `heads` independent length-`len` segments.
    pub fn softmax_causal_batched(&mut self, scores: Value, batch: usize, len: usize, heads: usize) -> Result<Value, NumericsError> {
        let s = self.shape(scores).to_vec();
        if s.len() != 2 || s[0] != batch * len || s[1] != heads * len {
            return Err(NumericsError::ShapeMismatch { op: "softmax_causal", lhs: s.clone(), rhs: vec![batch * len, heads * len] });
        }
        let op = Op::SoftmaxCausal { scores: scores.0, batch, len, heads };
        let value = self.eval_here(&op);
        let needs = self.needs(&[scores.0]);
        Ok(self.push(s, value, op, needs))
    }

    pub fn attn_context(&mut self, probs: Value, v: Value, batch: usize, len: usize, heads: usize) -> Result<Value, NumericsError> {
        let (sp, sv) = (self.shape(probs).to_vec(), self.shape(v).to_vec());
        if sp.len() != 2
            || sp[0] != batch * len
            || sp[1] != heads * len
            || sv[0] != batch * len
            || heads == 0
            || sv[1] % heads != 0
        {
            return Err(NumericsError::ShapeMismatch { op: "attn_context", lhs: sp, rhs: sv });
        }
        let dim = sv[1];
        let op = Op::AttnContext { probs: probs.0, v: v.0, batch, len, dim, heads };
        let value = self.eval_here(&op);
        let needs = self.needs(&[probs.0, v.0]);
        Ok(self.push(vec![batch * len, dim], value, op, needs))
    }

    /// out[i, :] = x[indices[i], :]; used for timestep-table lookups and for
    /// selecting the state-token rows out of the trunk output.
    pub fn gather_rows(&mut self, x: Value, indices: Vec<usize>) -> Result<Value, NumericsError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || indices.iter().any(|&i| i >= sx[0]) {
            return Err(NumericsError::ShapeMismatch { op: "gather_rows", lhs: sx, rhs: vec![indices.len()] });
        }
        let out_shape = vec![indices.len(), sx[1]];
        let op = Op::GatherRows { x: x.0, indices };
        let value = self.eval_here(&op);
        let needs = self.needs(&[x.0]);
        Ok(self.push(out_shape, value, op, needs))
    }

    /// Interleaves rows of three [g*w, d] inputs into [3*g*w, d]: within each
    /// group of `group` rows, output rows follow the (a_t, b_t, c_t) pattern.
    pub fn interleave3(&mut self, a: Value, b: Value, c: Value, group: usize) -> Result<Value, NumericsError> {
        let (sa, sb, sc) = (
            self.shape(a).to_vec(),
            self.shape(b).to_vec(),
            self.shape(c).to_vec(),
        );
        if sa != sb || sb != sc || sa.len() != 2 || group == 0 || sa[0] % group != 0 {
            return Err(NumericsError::ShapeMismatch { op: "interleave3", lhs: sa, rhs: sb });
        }
        let out_shape = vec![3 * sa[0], sa[1]];
        let op = Op::Interleave3 { a: a.0, b: b.0, c: c.0, group };
        let value = self.eval_here(&op);
        let needs = self.needs(&[a.0, b.0, c.0]);
        Ok(self.push(out_shape, value, op, needs))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Value, target: Value) -> Result<Value, NumericsError> {
        let (sp, st) = (self.shape(pred).to_vec(), self.shape(target).to_vec());
        if sp != st {
            return Err(NumericsError::ShapeMismatch { op: "mse", lhs: sp, rhs: st });
        }
        let rows = sp[0];
        self.mse_masked(pred, target, vec![1.0; rows])
    }

    /// Row-weighted mean squared error: sum_i w_i |pred_i - target_i|^2
    /// divided by (sum_i w_i) * row_width. Rows with weight zero contribute
    /// neither loss nor gradient.
    pub fn mse_masked(&mut self, pred: Value, target: Value, weights: Vec<f32>) -> Result<Value, NumericsError> {
        let (sp, st) = (self.shape(pred).to_vec(), self.shape(target).to_vec());
        if sp != st || weights.len() != sp[0] {
            return Err(NumericsError::ShapeMismatch { op: "mse_masked", lhs: sp, rhs: st });
        }
        let op = Op::MseMasked { pred: pred.0, target: target.0, weights };
        let value = self.eval_here(&op);
        let needs = self.needs(&[pred.0]);
        Ok(self.push(vec![1], value, op, needs))
    }

    pub fn sum(&mut self, x: Value) -> Value {
        let op = Op::Sum { x: x.0 };
        let value = self.eval_here(&op);
        let needs = self.needs(&[x.0]);
        self.push(vec![1], value, op, needs)
    }

    /// Reverse pass from a scalar node. Node gradients are reset first, so
    /// each call computes one clean pass; exporting twice via `apply_grads`
    /// doubles store gradients exactly.
    pub fn backward(&mut self, loss: Value) -> Result<(), NumericsError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NotScalar { shape: self.nodes[loss.0].shape.clone() });
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(NumericsError::NonFinite { context: "loss" });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let out_grad = self.nodes[idx].grad.take().unwrap();
            let op = self.nodes[idx].op.clone();
            self.step_backward(idx, &op, &out_grad);
            self.nodes[idx].grad = Some(out_grad);
        }
        Ok(())
    }

    /// Adds the gradients of store-backed leaves into the parameter store.
    pub fn apply_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(id), Some(grad)) = (node.source, node.grad.as_ref()) {
                if node.needs_grad {
                    store.accumulate_grad(id, grad);
                }
            }
        }
    }

    fn add_grad(&mut self, idx: usize, delta: &[f32]) {
        let node = &mut self.nodes[idx];
        if !node.needs_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    fn step_backward(&mut self, idx: usize, op: &Op, dout: &[f32]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(dout, &self.nodes[b].value, &mut da, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(&self.nodes[a].value, dout, &mut db, m, k, n);
                    self.add_grad(b, &db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[0];
                if self.nodes[a].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(dout, &self.nodes[b].value, &mut da, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(dout, &self.nodes[a].value, &mut db, m, n, k);
                    self.add_grad(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_grad(a, dout);
                self.add_grad(b, dout);
            }
            Op::Sub { a, b } => {
                self.add_grad(a, dout);
                if self.nodes[b].needs_grad {
                    let neg: Vec<f32> = dout.iter().map(|d| -d).collect();
                    self.add_grad(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a].needs_grad {
                    let da: Vec<f32> = dout.iter().zip(&self.nodes[b].value).map(|(d, v)| d * v).collect();
                    self.add_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let db: Vec<f32> = dout.iter().zip(&self.nodes[a].value).map(|(d, v)| d * v).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::AddBias { x, bias } => {
                self.add_grad(x, dout);
                if self.nodes[bias].needs_grad {
                    let d = self.nodes[bias].value.len();
                    let mut db = vec![0.0; d];
                    for row in dout.chunks_exact(d) {
                        for (g, v) in db.iter_mut().zip(row) {
                            *g += *v;
                        }
                    }
                    self.add_grad(bias, &db);
                }
            }
            Op::Scale { x, c } => {
                if self.nodes[x].needs_grad {
                    let dx: Vec<f32> = dout.iter().map(|d| c * d).collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Relu { x } => {
                if self.nodes[x].needs_grad {
                    let dx: Vec<f32> = dout
                        .iter()
                        .zip(&self.nodes[x].value)
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Tanh { x } => {
                if self.nodes[x].needs_grad {
                    let dx: Vec<f32> = dout
                        .iter()
                        .zip(&self.nodes[idx].value)
                        .map(|(d, y)| d * (1.0 - y * y))
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = self.nodes[x].shape[1];
                let rows = self.nodes[x].shape[0];
                let xv = &self.nodes[x].value;
                let gv = &self.nodes[gain].value;
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let dy = &dout[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f32>() / d as f32;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    let xhat: Vec<f32> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f32> = dy.iter().zip(gv).map(|(a, g)| a * g).collect();
                    let mean_dxhat = dxhat.iter().sum::<f32>() / d as f32;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                    for j in 0..d {
                        dx[r * d + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += dy[j] * xhat[j];
                        dbias[j] += dy[j];
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gain, &dgain);
                self.add_grad(bias, &dbias);
            }
            Op::AttnScores { q, k, batch, len, dim, heads } => {
                let dh = dim / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let qv = &self.nodes[q].value;
                let kv = &self.nodes[k].value;
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                for w in 0..batch {
                    for i in 0..len {
                        let row = (w * len + i) * heads * len;
                        let qrow = (w * len + i) * dim;
                        for hd in 0..heads {
                            let off = hd * dh;
                            for j in 0..=i {
                                let ds = dout[row + hd * len + j] * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (w * len + j) * dim;
                                for t in 0..dh {
                                    dq[qrow + off + t] += ds * kv[krow + off + t];
                                    dk[krow + off + t] += ds * qv[qrow + off + t];
                                }
                            }
                        }
                    }
                }
                self.add_grad(q, &dq);
                self.add_grad(k, &dk);
            }
            Op::SoftmaxCausal { scores, batch, len, heads } => {
                if self.nodes[scores].needs_grad {
                    let pv = &self.nodes[idx].value;
                    let mut ds = vec![0.0; pv.len()];
                    for w in 0..batch {
                        for i in 0..len {
                            let row = (w * len + i) * heads * len;
                            for hd in 0..heads {
                                let seg = row + hd * len;
                                let mut dot_dp_p = 0.0;
                                for j in 0..=i {
                                    dot_dp_p += dout[seg + j] * pv[seg + j];
                                }
                                for j in 0..=i {
                                    ds[seg + j] = pv[seg + j] * (dout[seg + j] - dot_dp_p);
                                }
                            }
                        }
                    }
                    self.add_grad(scores, &ds);
                }
            }
            Op::AttnContext { probs, v, batch, len, dim, heads } => {
                let dh = dim / heads;
                let pv = &self.nodes[probs].value;
                let vv = &self.nodes[v].value;
                let mut dp = vec![0.0; pv.len()];
                let mut dv = vec![0.0; vv.len()];
                for w in 0..batch {
                    for i in 0..len {
                        let prow = (w * len + i) * heads * len;
                        let crow = (w * len + i) * dim;
                        for hd in 0..heads {
                            let off = hd * dh;
                            let dc = &dout[crow + off..crow + off + dh];
                            for j in 0..=i {
                                let vrow = (w * len + j) * dim;
                                let vslice = &vv[vrow + off..vrow + off + dh];
                                dp[prow + hd * len + j] = dot(dc, vslice);
                                let p = pv[prow + hd * len + j];
                                if p != 0.0 {
                                    for t in 0..dh {
                                        dv[vrow + off + t] += p * dc[t];
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(probs, &dp);
                self.add_grad(v, &dv);
            }
            Op::GatherRows { x, ref indices } => {
                if self.nodes[x].needs_grad {
                    let d = self.nodes[x].shape[1];
                    let mut dx = vec![0.0; self.nodes[x].value.len()];
                    for (out_row, &src) in indices.iter().enumerate() {
                        for t in 0..d {
                            dx[src * d + t] += dout[out_row * d + t];
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Interleave3 { a, b, c, group } => {
                let d = self.nodes[a].shape[1];
                let rows = self.nodes[a].shape[0];
                let windows = rows / group;
                let mut da = vec![0.0; rows * d];
                let mut db = vec![0.0; rows * d];
                let mut dc = vec![0.0; rows * d];
                for w in 0..windows {
                    for t in 0..group {
                        let src = (w * group + t) * d;
                        let out = (w * 3 * group + 3 * t) * d;
                        da[src..src + d].copy_from_slice(&dout[out..out + d]);
                        db[src..src + d].copy_from_slice(&dout[out + d..out + 2 * d]);
                        dc[src..src + d].copy_from_slice(&dout[out + 2 * d..out + 3 * d]);
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
                self.add_grad(c, &dc);
            }
            Op::MseMasked { pred, target, ref weights } => {
                if self.nodes[pred].needs_grad {
                    let d = self.nodes[pred].shape[1..].iter().product::<usize>().max(1);
                    let total: f32 = weights.iter().sum::<f32>() * d as f32;
                    if total > 0.0 {
                        let pv = &self.nodes[pred].value;
                        let tv = &self.nodes[target].value;
                        let g = dout[0] * 2.0 / total;
                        let mut dp = vec![0.0; pv.len()];
                        for (r, &w) in weights.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                let i = r * d + t;
                                dp[i] = g * w * (pv[i] - tv[i]);
                            }
                        }
                        self.add_grad(pred, &dp);
                    }
                }
            }
            Op::Sum { x } => {
                if self.nodes[x].needs_grad {
                    let dx = vec![dout[0]; self.nodes[x].value.len()];
                    self.add_grad(x, &dx);
                }
            }
        }
    }

    /// Re-evaluates the recorded graph up to `target` in f64, optionally
    /// substituting the data of one leaf. This is an independent
    /// high-precision forward used by the finite-difference oracle.
    pub fn eval_f64(&self, target: Value, override_leaf: Option<(Value, &[f64])>) -> f64 {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(target.0 + 1);
        for idx in 0..=target.0 {
            let node = &self.nodes[idx];
            let v = match node.op {
                Op::Leaf => match override_leaf {
                    Some((leaf, data)) if leaf.0 == idx => data.to_vec(),
                    _ => node.value.iter().map(|&x| x as f64).collect(),
                },
                ref op => eval_op(op, |i| vals[i].as_slice(), |i| &self.nodes[i].shape),
            };
            vals.push(v);
        }
        debug_assert_eq!(vals[target.0].len(), 1);
        vals[target.0][0]
    }
}

/// Shared forward evaluation for the f32 eager path and the f64 replay.
fn eval_op<'a, T: Scalar + 'a>(
    op: &Op,
    get: impl Fn(usize) -> &'a [T],
    shape: impl Fn(usize) -> &'a [usize],
) -> Vec<T> {
    match *op {
        Op::Leaf => unreachable!("leaf nodes carry their value"),
        Op::MatMul { a, b } => {
            let (m, k) = (shape(a)[0], shape(a)[1]);
            let n = shape(b)[1];
            let mut c = vec![T::ZERO; m * n];
            gemm_nn(get(a), get(b), &mut c, m, k, n);
            c
        }
        Op::MatMulNt { a, b } => {
            let (m, k) = (shape(a)[0], shape(a)[1]);
            let n = shape(b)[0];
            let mut c = vec![T::ZERO; m * n];
            gemm_nt(get(a), get(b), &mut c, m, k, n);
            c
        }
        Op::Add { a, b } => get(a).iter().zip(get(b)).map(|(&x, &y)| x + y).collect(),
        Op::Sub { a, b } => get(a).iter().zip(get(b)).map(|(&x, &y)| x - y).collect(),
        Op::Mul { a, b } => get(a).iter().zip(get(b)).map(|(&x, &y)| x * y).collect(),
        Op::AddBias { x, bias } => {
            let d = shape(bias)[0];
            let xv = get(x);
            let bv = get(bias);
            let mut out = Vec::with_capacity(xv.len());
            for row in xv.chunks_exact(d) {
                for (v, b) in row.iter().zip(bv) {
                    out.push(*v + *b);
                }
            }
            out
        }
        Op::Scale { x, c } => {
            let cv = T::from_f32(c);
            get(x).iter().map(|&v| v * cv).collect()
        }
        Op::Relu { x } => get(x).iter().map(|&v| v.max(T::ZERO)).collect(),
        Op::Tanh { x } => get(x).iter().map(|&v| v.tanh()).collect(),
        Op::LayerNorm { x, gain, bias } => {
            let d = shape(x)[1];
            let xv = get(x);
            let gv = get(gain);
            let bv = get(bias);
            let dn = T::from_f32(d as f32);
            let eps = T::from_f32(LAYERNORM_EPS);
            let mut out = Vec::with_capacity(xv.len());
            for row in xv.chunks_exact(d) {
                let mut sum = T::ZERO;
                for &v in row {
                    sum = sum + v;
                }
                let mean = sum / dn;
                let mut var = T::ZERO;
                for &v in row {
                    var = var + (v - mean) * (v - mean);
                }
                let var = var / dn;
                let inv = T::ONE / (var + eps).sqrt();
                for (j, &v) in row.iter().enumerate() {
                    out.push(gv[j] * ((v - mean) * inv) + bv[j]);
                }
            }
            out
        }
        Op::AttnScores { q, k, batch, len, dim, heads } => {
            let dh = dim / heads;
            let scale = T::ONE / T::from_f32(dh as f32).sqrt();
            let qv = get(q);
            let kv = get(k);
            let mut out = vec![T::ZERO; batch * len * heads * len];
            for w in 0..batch {
                for i in 0..len {
                    let row = (w * len + i) * heads * len;
                    let qrow = (w * len + i) * dim;
                    for hd in 0..heads {
                        let off = hd * dh;
                        for j in 0..=i {
                            let krow = (w * len + j) * dim;
                            out[row + hd * len + j] = scale
                                * dot(&qv[qrow + off..qrow + off + dh], &kv[krow + off..krow + off + dh]);
                        }
                    }
                }
            }
            out
        }
        Op::SoftmaxCausal { scores, batch, len, heads } => {
            let sv = get(scores);
            let mut out = vec![T::ZERO; sv.len()];
            for w in 0..batch {
                for i in 0..len {
                    let row = (w * len + i) * heads * len;
                    for hd in 0..heads {
                        let seg = row + hd * len;
                        let mut m = sv[seg];
                        for j in 1..=i {
                            m = m.max(sv[seg + j]);
                        }
                        let mut denom = T::ZERO;
                        for j in 0..=i {
                            let e = (sv[seg + j] - m).exp();
                            out[seg + j] = e;
                            denom = denom + e;
                        }
                        for j in 0..=i {
                            out[seg + j] = out[seg + j] / denom;
                        }
                    }
                }
            }
            out
        }
        Op::AttnContext { probs, v, batch, len, dim, heads } => {
            let dh = dim / heads;
            let pv = get(probs);
            let vv = get(v);
            let mut out = vec![T::ZERO; batch * len * dim];
            for w in 0..batch {
                for i in 0..len {
                    let prow = (w * len + i) * heads * len;
                    let crow = (w * len + i) * dim;
                    for hd in 0..heads {
                        let off = hd * dh;
                        for j in 0..=i {
                            let p = pv[prow + hd * len + j];
                            let vrow = (w * len + j) * dim;
                            for t in 0..dh {
                                out[crow + off + t] = out[crow + off + t] + p * vv[vrow + off + t];
                            }
                        }
                    }
                }
            }
            out
        }
        Op::GatherRows { x, ref indices } => {
            let d = shape(x)[1];
            let xv = get(x);
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                out.extend_from_slice(&xv[i * d..(i + 1) * d]);
            }
            out
        }
        Op::Interleave3 { a, b, c, group } => {
            let d = shape(a)[1];
            let rows = shape(a)[0];
            let windows = rows / group;
            let (av, bv, cv) = (get(a), get(b), get(c));
            let mut out = Vec::with_capacity(3 * rows * d);
            for w in 0..windows {
                for t in 0..group {
                    let src = (w * group + t) * d;
                    out.extend_from_slice(&av[src..src + d]);
                    out.extend_from_slice(&bv[src..src + d]);
                    out.extend_from_slice(&cv[src..src + d]);
                }
            }
            out
        }
        Op::MseMasked { pred, target, ref weights } => {
            let d = shape(pred)[1..].iter().product::<usize>().max(1);
            let pv = get(pred);
            let tv = get(target);
            let mut total_w = T::ZERO;
            let mut acc = T::ZERO;
            for (r, &w) in weights.iter().enumerate() {
                let wt = T::from_f32(w);
                total_w = total_w + wt;
                if w == 0.0 {
                    continue;
                }
                for t in 0..d {
                    let diff = pv[r * d + t] - tv[r * d + t];
                    acc = acc + wt * diff * diff;
                }
            }
            let denom = total_w * T::from_f32(d as f32);
            if denom > T::ZERO {
                vec![acc / denom]
            } else {
                vec![T::ZERO]
            }
        }
        Op::Sum { x } => {
            let mut acc = T::ZERO;
            for &v in get(x) {
                acc = acc + v;
            }
            vec![acc]
        }
    }
}

/// u . v / (|u| |v|), with the zero-vector convention of returning 0 so the
/// similarity never produces NaN.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> f32 {
    assert_eq!(u.len(), v.len(), "cosine_similarity length mismatch");
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    let c = dot(u, v) / (uu.sqrt() * vv.sqrt());
    c.clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let prod = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(prod), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(&t2(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.leaf(&t2(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        let z = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(z), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(&t2(2, 2, &[0.0; 4]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_forward_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0, 0.0]);
        let pos = tape.leaf(&Tensor::new(vec![3], vec![0.5, 1.0, 7.0]).unwrap());
        let y = tape.relu(pos);
        assert_eq!(tape.value(y), &[0.5, 1.0, 7.0]);
    }

    #[test]
    fn layernorm_hand_cases() {
        let mut tape = Tape::new();
        let gain = tape.leaf(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let bias = tape.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());

        // Constant row: zero variance maps through epsilon to ~0.
        let c = tape.leaf(&t2(1, 2, &[3.0, 3.0]));
        let y = tape.layernorm(c, gain, bias).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-6));

        // Row [1,-1]: mean 0, var 1 -> (x)/sqrt(1+eps) which is ~[1,-1].
        let r = tape.leaf(&t2(1, 2, &[1.0, -1.0]));
        let y = tape.layernorm(r, gain, bias).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-4);
        assert!((v[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_causal_uniform_rows() {
        let mut tape = Tape::new();
        let s = tape.leaf(&t2(4, 4, &[0.7; 16]));
        let p = tape.softmax_causal(s).unwrap();
        let v = tape.value(p);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if j <= i { 1.0 / (i as f32 + 1.0) } else { 0.0 };
                assert!((v[i * 4 + j] - expect).abs() < 1e-6, "row {i} col {j}");
            }
        }
        // Row 0 is exactly [1, 0, 0, 0].
        assert_eq!(v[0], 1.0);
        assert_eq!(&v[1..4], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_masked_exactly_zero() {
        let mut rng = crate::numerics::Rng::new(5);
        for _ in 0..50 {
            let n = 1 + rng.below(6);
            let data: Vec<f32> = (0..n * n).map(|_| rng.normal(0.0, 2.0)).collect();
            let mut tape = Tape::new();
            let s = tape.leaf(&t2(n, n, &data));
            let p = tape.softmax_causal(s).unwrap();
            let v = tape.value(p);
            for i in 0..n {
                let sum: f32 = v[i * n..(i + 1) * n].iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6);
                for j in i + 1..n {
                    assert_eq!(v[i * n + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn mse_cases() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::new(vec![1], vec![2.0]).unwrap());
        let t = tape.leaf(&Tensor::new(vec![1], vec![0.0]).unwrap());
        let l = tape.mse(p, t).unwrap();
        assert_eq!(tape.scalar_value(l), 4.0);

        let a = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let l = tape.mse(a, a).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        // Independent oracle: sum of squares / count.
        let mut rng = crate::numerics::Rng::new(9);
        let pd: Vec<f32> = (0..12).map(|_| rng.normal(0.0, 1.0)).collect();
        let td: Vec<f32> = (0..12).map(|_| rng.normal(0.0, 1.0)).collect();
        let expected: f32 =
            pd.iter().zip(&td).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() / 12.0;
        let p = tape.leaf(&t2(3, 4, &pd));
        let t = tape.leaf(&t2(3, 4, &td));
        let l = tape.mse(p, t).unwrap();
        assert!((tape.scalar_value(l) - expected).abs() < 1e-6);
    }

    #[test]
    fn cosine_similarity_conventions() {
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]), -1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn backward_accumulates_and_doubles_without_reset() {
        let mut store = ParamStore::new();
        let w = store.register("w", t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));

        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.leaf(&t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(wv, x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        tape.apply_grads(&mut store);
        let g1 = store.value(w).grad().unwrap().to_vec();
        tape.backward(l).unwrap();
        tape.apply_grads(&mut store);
        let g2 = store.value(w).grad().unwrap().to_vec();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn frozen_params_get_no_grads() {
        let mut store = ParamStore::new();
        let w = store.register("w", t2(1, 2, &[1.0, 2.0]));
        store.set_frozen(w, true);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let l = tape.sum(wv);
        tape.backward(l).unwrap();
        tape.apply_grads(&mut store);
        assert!(store.value(w).grad().is_none());
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::new(vec![1], vec![3.0e38]).unwrap());
        let b = tape.add(a, a).unwrap(); // overflows to +inf
        assert!(matches!(
            tape.backward(b),
            Err(NumericsError::NonFinite { .. })
        ));
    }

    #[test]
    fn interleave3_roundtrip_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(2, 1, &[1.0, 4.0]));
        let b = tape.leaf(&t2(2, 1, &[2.0, 5.0]));
        let c = tape.leaf(&t2(2, 1, &[3.0, 6.0]));
        let out = tape.interleave3(a, b, c, 2).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        // Two groups of one row each: windows interleave independently.
        let out2 = tape.interleave3(a, b, c, 1).unwrap();
        assert_eq!(tape.value(out2), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let mut tape = Tape::new();
        let p = tape.input(&t2(2, 2, &[1.0, 1.0, 9.0, 9.0]));
        let t = tape.leaf(&t2(2, 2, &[0.0, 0.0, 123.0, -7.0]));
        let l = tape.mse_masked(p, t, vec![1.0, 0.0]).unwrap();
        // Only row 0 counts: (1 + 1) / 2.
        assert_eq!(tape.scalar_value(l), 1.0);
        tape.backward(l).unwrap();
        let g = tape.grad(p).unwrap();
        assert_eq!(&g[2..4], &[0.0, 0.0]);
    }
}
