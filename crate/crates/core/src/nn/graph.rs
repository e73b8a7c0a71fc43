//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so building a graph per
//! sample (or per generated token) is cheap. Frozen parameters never get a
//! gradient buffer, which also skips the weight-gradient half of the matmuls
//! that touch them.

use super::params::{ParamId, ParamStore};
use super::tensor::{
    dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, softmax_in_place, Float, Tensor,
};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Key visibility for [`Graph::attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Query row `i` sits at absolute index `query_offset + i`; key `j` is
    /// visible when `j < prefix` or `j <= query_offset + i`. The first
    /// `prefix` keys form a bidirectional block.
    Causal { query_offset: usize, prefix: usize },
}

impl AttnMask {
    #[inline]
    fn visible(self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal {
                query_offset,
                prefix,
            } => j < prefix || j <= query_offset + i,
        }
    }
}

enum Op<F> {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: F,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Tensor<F>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        /// Per-row softmax for rows that contribute a gradient.
        rows: Vec<(usize, usize, Vec<f64>)>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node<F> {
    op: Op<F>,
    value: Option<Tensor<F>>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn empty(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// `self += weight * other`, in parameter order.
    pub fn accumulate(&mut self, other: &Self, weight: F) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => {
                    for (a, &b) in d.data_mut().iter_mut().zip(src.data()) {
                        *a += weight * b;
                    }
                }
                None => {
                    let mut t = src.clone();
                    t.scale_assign(weight);
                    *dst = Some(t);
                }
            }
        }
    }

    /// Writes the gradients into the store's `grad` buffers (overwriting).
    pub fn store_into(&self, store: &mut ParamStore<F>) {
        store.zero_grads();
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                store.get_mut(ParamId(i)).grad = g.clone();
            }
        }
    }
}

pub struct Graph<'p, F: Float = f32> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    all_params_require_grad: bool,
    params_frozen: bool,
}

fn shape_err<F: Float>(what: &str, a: &Tensor<F>, b: &Tensor<F>) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl<'p, F: Float> Graph<'p, F> {
    /// A recording graph; trainable parameters receive gradients.
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
            grad_enabled: true,
            all_params_require_grad: false,
            params_frozen: false,
        }
    }

    /// Inference graph: nothing requires a gradient.
    pub fn no_grad(store: &'p ParamStore<F>) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    /// Treat every parameter as trainable regardless of its flag.
    pub fn with_all_params(mut self) -> Self {
        self.all_params_require_grad = true;
        self
    }

    /// No parameter requires a gradient; only leaves created with
    /// [`Graph::input_with_grad`] do.
    pub fn with_frozen_params(mut self) -> Self {
        self.params_frozen = true;
        self
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, parents_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad: self.grad_enabled && parents_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Input, t, false)
    }

    /// Leaf that receives a gradient even though it is not a parameter
    /// (used for gradient-weighted attention maps).
    pub fn input_with_grad(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Input, t, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let requires =
            self.grad_enabled && !self.params_frozen && (p.trainable || self.all_params_require_grad);
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: requires,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x[n×d_in] · w[d_in×d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(shape_err("linear input vs weight", xv, wv));
        }
        let (n, din, dout) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = vec![F::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(shape_err("linear weight vs bias", wv, bv));
            }
            for r in 0..n {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
        }
        matmul_acc(xv.data(), wv.data(), &mut out, n, din, dout);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Op::Linear { x, w, b },
            Tensor::new(vec![n, dout], out)?,
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![F::zero(); m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, out, rg))
    }

    /// Adds a length-`d` vector to every row of `x[n×d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() {
            return Err(shape_err("add_row", xv, rv));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for r in 0..out.rows() {
            for (o, &b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Op::AddRow { x, row }, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a, b }, out, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::lit(s);
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(Op::Scale { x, s }, out, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(Op::Gelu { x }, out, rg)
    }

    /// Row-wise layer norm with epsilon [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if d == 0 || gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm input vs gain", xv, gv));
        }
        let n = xv.rows();
        let eps = F::lit(LAYER_NORM_EPS);
        let inv_d = F::lit(1.0 / d as f64);
        let mut xhat = vec![F::zero(); n * d];
        let mut inv_std = vec![F::zero(); n];
        let mut out = vec![F::zero(); n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Tensor::new(vec![n, d], out)?,
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention. `q` is `m×d`, `k` and `v` are
    /// `n×d`; head `h` uses columns `h·d/heads .. (h+1)·d/heads`. Weights are
    /// kept on the node (`heads×m×n`) for inspection via
    /// [`Graph::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        if kv.cols() != d || vv.cols() != d {
            return Err(shape_err("attention query vs key", qv, kv));
        }
        if kv.rows() != vv.rows() {
            return Err(shape_err("attention key vs value", kv, vv));
        }
        let (m, n) = (qv.rows(), kv.rows());
        if n == 0 {
            return Err(Error::Shape("attention over zero keys".into()));
        }
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut weights = vec![F::zero(); heads * m * n];
        let mut out = vec![F::zero(); m * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..m {
                let qi = &qv.row(i)[c0..c0 + dh];
                let w = &mut weights[(h * m + i) * n..(h * m + i + 1) * n];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = if mask.visible(i, j) {
                        dot(qi, &kv.row(j)[c0..c0 + dh]) * scale
                    } else {
                        F::neg_infinity()
                    };
                }
                softmax_in_place(w);
                let o = &mut out[i * d + c0..i * d + c0 + dh];
                for (j, &wj) in w.iter().enumerate() {
                    if wj == F::zero() {
                        continue;
                    }
                    for (ov, &vj) in o.iter_mut().zip(&vv.row(j)[c0..c0 + dh]) {
                        *ov += wj * vj;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights: Tensor::new(vec![heads, m, n], weights)?,
            },
            Tensor::new(vec![m, d], out)?,
            rg,
        ))
    }

    pub fn attention_weights(&self, v: Var) -> Option<&Tensor<F>> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::Shape(format!(
                "row slice {start}..{end} of {:?}",
                xv.shape()
            )));
        }
        let out = xv.slice_rows(start, end);
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows { x, start }, out, rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::Shape(format!(
                    "row id {id} out of range for table {:?}",
                    tv.shape()
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
        ))
    }

    /// Mean over non-ignored rows of `-ln softmax(logits)[target]`, with the
    /// probability floored at [`LOG_FLOOR`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (n, classes) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{} targets for logits {:?}",
                targets.len(),
                lv.shape()
            )));
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut rows = Vec::new();
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= classes {
                return Err(Error::Shape(format!(
                    "target {t} out of range for {classes} classes"
                )));
            }
            count += 1;
            let row = lv.row(r);
            let (loss, probs) = ce_row(row, t);
            total += loss;
            if let Some(p) = probs {
                rows.push((r, t, p));
            }
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let value = Tensor::scalar(F::lit(total / count as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                rows: if rg { rows } else { Vec::new() },
                count,
            },
            value,
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), rg)
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        Ok(self.backward_with_inputs(loss, &[])?.0)
    }

    /// Like [`Graph::backward`], additionally returning the gradients of the
    /// given non-parameter leaves (zero when unreachable).
    pub fn backward_with_inputs(&self, loss: Var, inputs: &[Var]) -> Result<(Gradients<F>, Vec<Tensor<F>>)> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut out = Gradients::empty(self.store.len());
        if !self.rg(loss) {
            let zeros = inputs.iter().map(|&v| Tensor::zeros(self.value(v).shape())).collect();
            return Ok((out, zeros));
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(dy);
                }
                Op::Param(id) => {
                    out.grads[id.0] = Some(dy);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, din, dout) = (xv.rows(), xv.cols(), wv.cols());
                    if self.rg(*x) {
                        let g = acc_slot(&mut grads, *x, xv.shape());
                        matmul_a_bt_acc(dy.data(), wv.data(), g.data_mut(), n, dout, din);
                    }
                    if self.rg(*w) {
                        let g = acc_slot(&mut grads, *w, wv.shape());
                        matmul_at_b_acc(xv.data(), dy.data(), g.data_mut(), n, din, dout);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        let g = acc_slot(&mut grads, b, self.value(b).shape());
                        let gd = g.data_mut();
                        for r in 0..n {
                            for (o, &d) in gd.iter_mut().zip(dy.row(r)) {
                                *o += d;
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.rg(*a) {
                        let g = acc_slot(&mut grads, *a, av.shape());
                        matmul_a_bt_acc(dy.data(), bv.data(), g.data_mut(), m, n, k);
                    }
                    if self.rg(*b) {
                        let g = acc_slot(&mut grads, *b, bv.shape());
                        matmul_at_b_acc(av.data(), dy.data(), g.data_mut(), m, k, n);
                    }
                }
                Op::Add { a, b } => {
                    for p in [*a, *b] {
                        if self.rg(p) {
                            acc_slot(&mut grads, p, dy.shape()).add_assign(&dy);
                        }
                    }
                }
                Op::AddRow { x, row } => {
                    if self.rg(*x) {
                        acc_slot(&mut grads, *x, dy.shape()).add_assign(&dy);
                    }
                    if self.rg(*row) {
                        let shape = self.value(*row).shape().to_vec();
                        let g = acc_slot(&mut grads, *row, &shape);
                        for r in 0..dy.rows() {
                            for (o, &d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                                *o += d;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let g = acc_slot(&mut grads, *a, av.shape());
                        for ((o, &d), &y) in g.data_mut().iter_mut().zip(dy.data()).zip(bv.data()) {
                            *o += d * y;
                        }
                    }
                    if self.rg(*b) {
                        let g = acc_slot(&mut grads, *b, bv.shape());
                        for ((o, &d), &x) in g.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                            *o += d * x;
                        }
                    }
                }
                Op::Scale { x, s } => {
                    let g = acc_slot(&mut grads, *x, dy.shape());
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += d * *s;
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let g = acc_slot(&mut grads, *x, xv.shape());
                    for ((o, &d), &xi) in g.data_mut().iter_mut().zip(dy.data()).zip(xv.data()) {
                        *o += d * gelu_grad(xi);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let d = gv.len();
                    let n = inv_std.len();
                    if self.rg(*gain) {
                        let g = acc_slot(&mut grads, *gain, gv.shape());
                        for r in 0..n {
                            for j in 0..d {
                                g.data_mut()[j] += dy.data()[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if self.rg(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        let g = acc_slot(&mut grads, *bias, &shape);
                        for r in 0..n {
                            for (o, &dv) in g.data_mut().iter_mut().zip(dy.row(r)) {
                                *o += dv;
                            }
                        }
                    }
                    if self.rg(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        let g = acc_slot(&mut grads, *x, &shape);
                        let inv_d = F::lit(1.0 / d as f64);
                        let mut dxhat = vec![F::zero(); d];
                        for r in 0..n {
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for j in 0..d {
                                dxhat[j] = dy.data()[r * d + j] * gv.data()[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xh[j];
                            }
                            let gr = &mut g.data_mut()[r * d..(r + 1) * d];
                            for j in 0..d {
                                gr[j] += inv_std[r] * (dxhat[j] - inv_d * s1 - xh[j] * inv_d * s2);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    weights,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (m, n, d) = (qv.rows(), kv.rows(), qv.cols());
                    let dh = d / heads;
                    let scale = F::lit(1.0 / (dh as f64).sqrt());
                    let mut dq = vec![F::zero(); m * d];
                    let mut dk = vec![F::zero(); n * d];
                    let mut dv = vec![F::zero(); n * d];
                    let mut dw = vec![F::zero(); n];
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..m {
                            let w = &weights.data()[(h * m + i) * n..(h * m + i + 1) * n];
                            let dout = &dy.row(i)[c0..c0 + dh];
                            let mut wsum = F::zero();
                            for j in 0..n {
                                if w[j] == F::zero() {
                                    dw[j] = F::zero();
                                    continue;
                                }
                                dw[j] = dot(dout, &vv.row(j)[c0..c0 + dh]);
                                wsum += dw[j] * w[j];
                                let dvr = &mut dv[j * d + c0..j * d + c0 + dh];
                                for (o, &g) in dvr.iter_mut().zip(dout) {
                                    *o += w[j] * g;
                                }
                            }
                            let qi = &qv.row(i)[c0..c0 + dh];
                            for j in 0..n {
                                if w[j] == F::zero() {
                                    continue;
                                }
                                let ds = w[j] * (dw[j] - wsum) * scale;
                                let kj = &kv.row(j)[c0..c0 + dh];
                                for t in 0..dh {
                                    dq[i * d + c0 + t] += ds * kj[t];
                                    dk[j * d + c0 + t] += ds * qi[t];
                                }
                            }
                        }
                    }
                    for (p, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.rg(p) {
                            let shape = self.value(p).shape().to_vec();
                            let g = acc_slot(&mut grads, p, &shape);
                            for (o, b) in g.data_mut().iter_mut().zip(buf) {
                                *o += b;
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let c = dy.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.rg(p) {
                            let shape = self.value(p).shape().to_vec();
                            let g = acc_slot(&mut grads, p, &shape);
                            for (o, &d) in g
                                .data_mut()
                                .iter_mut()
                                .zip(&dy.data()[offset * c..(offset + rows) * c])
                            {
                                *o += d;
                            }
                        }
                        offset += rows;
                    }
                }
                Op::SliceRows { x, start } => {
                    let shape = self.value(*x).shape().to_vec();
                    let c = dy.cols();
                    let g = acc_slot(&mut grads, *x, &shape);
                    for (o, &d) in g.data_mut()[start * c..start * c + dy.len()]
                        .iter_mut()
                        .zip(dy.data())
                    {
                        *o += d;
                    }
                }
                Op::Gather { table, ids } => {
                    let shape = self.value(*table).shape().to_vec();
                    let c = dy.cols();
                    let g = acc_slot(&mut grads, *table, &shape);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &d) in g.data_mut()[id * c..(id + 1) * c].iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    rows,
                    count,
                } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let c = shape[shape.len() - 1];
                    let upstream = dy.data()[0].as_f64() / *count as f64;
                    let g = acc_slot(&mut grads, *logits, &shape);
                    for (r, t, probs) in rows {
                        let gr = &mut g.data_mut()[r * c..(r + 1) * c];
                        for (j, (o, &p)) in gr.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            *o += F::lit((p - onehot) * upstream);
                        }
                    }
                }
                Op::Sum { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    let g = acc_slot(&mut grads, *x, &shape);
                    let d = dy.data()[0];
                    for o in g.data_mut() {
                        *o += d;
                    }
                }
            }
        }
        let input_grads = inputs
            .iter()
            .map(|&v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
            })
            .collect();
        Ok((out, input_grads))
    }
}

fn acc_slot<'a, F: Float>(grads: &'a mut [Option<Tensor<F>>], v: Var, shape: &[usize]) -> &'a mut Tensor<F> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Loss for one row, plus the softmax when the gradient is non-zero.
fn ce_row<F: Float>(row: &[F], target: usize) -> (f64, Option<Vec<f64>>) {
    let (jmax, max) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bj, bm), (j, &x)| {
            let x = x.as_f64();
            if x > bm {
                (j, x)
            } else {
                (bj, bm)
            }
        });
    let exps: Vec<f64> = row.iter().map(|&x| (x.as_f64() - max).exp()).collect();
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != jmax)
        .map(|(_, &e)| e)
        .sum();
    // ln(sum exp(x - max)) without losing the tail when the target is the max.
    let lse_minus_max = rest.ln_1p();
    let loss = lse_minus_max + (max - row[target].as_f64());
    let floor = -LOG_FLOOR.ln();
    if loss > floor {
        return (floor, None);
    }
    let total = 1.0 + rest;
    (loss, Some(exps.iter().map(|e| e / total).collect()))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<F: Float>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(0.044715);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(0.044715);
    let half = F::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}
