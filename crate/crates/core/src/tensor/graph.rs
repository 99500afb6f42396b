//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. `backward` walks the nodes in exact reverse append order,
//! which is a valid reverse topological order because inputs always precede
//! their consumers.

use super::kernels::{axis_split, broadcast_map, gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid};
use super::{Element, ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NO_SOURCE: usize = usize::MAX;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    /// out[i] = x[map[i]], or zero where map[i] == NO_SOURCE.
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded computation graph, rebuilt for every forward pass.
pub struct Graph<'p, T: Element> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    bound: Vec<Option<Var>>,
    params_trainable: bool,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            params_trainable: false,
            grads: Vec::new(),
        }
    }

    /// Graph whose parameter leaves require gradients.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            bound: vec![None; store.len()],
            params_trainable: true,
            grads: Vec::new(),
        }
    }

    /// Graph over frozen parameters; nothing requires gradients.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Graph {
            params_trainable: false,
            ..Self::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(move |(i, v)| v.and_then(|v| self.grad(v)).map(|g| (ParamId(i), g)))
    }

    /// Consumes the graph, releasing the parameter borrow, and returns the
    /// parameter gradients in id order.
    pub fn into_param_grads(mut self) -> ParamGrads<T> {
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(g) = v
                .and_then(|v| self.grads.get_mut(v.0))
                .and_then(Option::take)
            {
                out.push((ParamId(i), g));
            }
        }
        out
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::contract("graph has no parameter store"))?;
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.leaf(store.value(id).clone(), self.params_trainable)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    fn broadcast_plan(&self, op: &'static str, a: Var, b: Var) -> Result<Option<Vec<usize>>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(None);
        }
        broadcast_map(sa, sb).map(Some).ok_or_else(|| Error::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    /// Elementwise `a + b`; `b` may broadcast against `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast_plan("add", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = match &map {
            None => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            Some(m) => av.iter().zip(m).map(|(&x, &j)| x + bv[j]).collect(),
        };
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("add", t, Op::Add { a, b, map }, &[a, b])
    }

    /// Elementwise `a * b`; `b` may broadcast against `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast_plan("mul", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = match &map {
            None => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
            Some(m) => av.iter().zip(m).map(|(&x, &j)| x * bv[j]).collect(),
        };
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("mul", t, Op::Mul { a, b, map }, &[a, b])
    }

    /// `x * scale + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, b) = (T::lit(scale), T::lit(shift));
        let t = self.value(x).map(|v| v * s + b);
        self.push("affine", t, Op::Affine { x, scale: s }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Index {
                what: op,
                index: axis,
                size: self.shape(x).len(),
            });
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax axis", x, axis)?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(xv[at(k)]);
                }
                let mut z = T::zero();
                for k in 0..len {
                    let e = (xv[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalization along `axis` with per-feature gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var> {
        self.check_axis("layer_norm axis", x, axis)?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        for p in [gain, bias] {
            if self.value(p).numel() != len {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::lit(eps);
        let n = T::lit(len as f64);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mean = (0..len).map(|k| xv[at(k)]).sum::<T>() / n;
                let var = (0..len).map(|k| (xv[at(k)] - mean).powi(2)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for k in 0..len {
                    let h = (xv[at(k)] - mean) * r;
                    xhat[at(k)] = h;
                    out[at(k)] = h * gv[k] + bv[k];
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    fn gather(
        &mut self,
        op: &'static str,
        x: Var,
        shape: Vec<usize>,
        map: Vec<usize>,
    ) -> Result<Var> {
        let xv = self.value(x).data();
        let out = map
            .iter()
            .map(|&j| if j == NO_SOURCE { T::zero() } else { xv[j] })
            .collect();
        let t = Tensor::new(shape, out)?;
        self.push(op, t, Op::Gather { x, map }, &[x])
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "transpose expects rank 2".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let map = (0..r * c).map(|f| (f % r) * c + f / r).collect();
        self.gather("transpose", x, vec![c, r], map)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Index {
                what: "narrow",
                index: start + len,
                size: shape[axis],
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for k in start..start + len {
                for i in 0..inner {
                    map.push((o * full + k) * inner + i);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather("narrow", x, out_shape, map)
    }

    /// Row gather from a `[rows × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "embedding table must be rank 2".into(),
            });
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of an empty id sequence"));
        }
        let (rows, d) = (s[0], s[1]);
        let mut map = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    size: rows,
                });
            }
            map.extend(id * d..(id + 1) * d);
        }
        self.gather("embedding", table, vec![ids.len(), d], map)
    }

    /// Patch extraction for a `[H × W × C]` map: each output row is one
    /// kernel window flattened as (ky, kx, c); out-of-bounds taps are zero.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3
            || kernel == 0
            || stride == 0
            || s[0] + 2 * pad < kernel
            || s[1] + 2 * pad < kernel
        {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("cannot take {kernel}x{kernel} windows"),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let cols = kernel * kernel * c;
        let mut map = Vec::with_capacity(ho * wo * cols);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ch in 0..c {
                            map.push(if inside {
                                ((iy as usize) * w + ix as usize) * c + ch
                            } else {
                                NO_SOURCE
                            });
                        }
                    }
                }
            }
        }
        self.gather("im2col", x, vec![ho * wo, cols], map)
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        self.check_axis("concat axis", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            "concat",
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Mean token cross-entropy of `[n × V]` logits; positions whose target
    /// equals `ignore` do not contribute.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let (n, v) = (s[0], s[1]);
        let mut tg = Vec::with_capacity(n);
        for &t in targets {
            if Some(t) == ignore {
                tg.push(None);
            } else if t >= v {
                return Err(Error::Index {
                    what: "target id",
                    index: t,
                    size: v,
                });
            } else {
                tg.push(Some(t));
            }
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy with every target ignored"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for r in 0..n {
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - mx).exp();
                z = z + *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            if let Some(t) = tg[r] {
                total = total + (z.ln() + mx - row[t]);
            }
        }
        let loss = Tensor::scalar(total / T::lit(count as f64));
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Populates gradients of `loss` (a single-element tensor) for every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let nodes = &self.nodes;
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        gemm_nt_acc(&g, nodes[b.0].value.data(), ga, m, k, n);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gemm_tn_acc(nodes[a.0].value.data(), &g, gb, m, k, n);
                    }
                }
                Op::Add { a, b, map } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        match map {
                            None => add_into(gb, &g),
                            Some(m) => {
                                for (&j, &gi) in m.iter().zip(&g) {
                                    gb[j] = gb[j] + gi;
                                }
                            }
                        }
                    }
                }
                Op::Mul { a, b, map } => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (i, (x, &gi)) in ga.iter_mut().zip(&g).enumerate() {
                            let j = map.as_ref().map_or(i, |m| m[i]);
                            *x = *x + gi * bv[j];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for (i, (&x, &gi)) in av.iter().zip(&g).enumerate() {
                            let j = map.as_ref().map_or(i, |m| m[i]);
                            gb[j] = gb[j] + gi * x;
                        }
                    }
                }
                Op::Affine { x, scale } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (o, &gi) in gx.iter_mut().zip(&g) {
                            *o = *o + gi * *scale;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((o, &gi), &v) in gx.iter_mut().zip(&g).zip(xv) {
                            if v > T::zero() {
                                *o = *o + gi;
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((o, &gi), &y) in gx.iter_mut().zip(&g).zip(yv) {
                            *o = *o + gi * y * (T::one() - y);
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let yv = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| (o * len + k) * inner + i;
                                let dot: T = (0..len).map(|k| g[at(k)] * yv[at(k)]).sum();
                                for k in 0..len {
                                    gx[at(k)] = gx[at(k)] + yv[at(k)] * (g[at(k)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    axis,
                    xhat,
                    rstd,
                } => {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let gv = nodes[gain.0].value.data();
                    let n = T::lit(len as f64);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| (o * len + k) * inner + i;
                                let gh = |k: usize| g[at(k)] * gv[k];
                                let m1 = (0..len).map(gh).sum::<T>() / n;
                                let m2 = (0..len).map(|k| gh(k) * xhat[at(k)]).sum::<T>() / n;
                                let r = rstd[o * inner + i];
                                for k in 0..len {
                                    gx[at(k)] = gx[at(k)] + r * (gh(k) - m1 - xhat[at(k)] * m2);
                                }
                            }
                        }
                    }
                    if let Some(gg) = slot(&mut grads, nodes, *gain) {
                        for (f, &gi) in g.iter().enumerate() {
                            let k = (f / inner) % len;
                            gg[k] = gg[k] + gi * xhat[f];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        for (f, &gi) in g.iter().enumerate() {
                            let k = (f / inner) % len;
                            gb[k] = gb[k] + gi;
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_into(gx, &g);
                    }
                }
                Op::Gather { x, map } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (&j, &gi) in map.iter().zip(&g) {
                            if j != NO_SOURCE {
                                gx[j] = gx[j] + gi;
                            }
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                    let total: usize = node.value.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &v in inputs {
                        let block = nodes[v.0].value.shape()[*axis] * inner;
                        if let Some(gv) = slot(&mut grads, nodes, v) {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + block];
                                add_into(&mut gv[o * block..(o + 1) * block], src);
                            }
                        }
                        offset += block;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let v = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / T::lit(*count as f64);
                    if let Some(gl) = slot(&mut grads, nodes, *logits) {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for c in 0..v {
                                let onehot = if c == t { T::one() } else { T::zero() };
                                gl[r * v + c] = gl[r * v + c] + scale * (probs[r * v + c] - onehot);
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for o in gx.iter_mut() {
                            *o = *o + g[0];
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn slot<'g, T: Element>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'g mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![T::zero(); n])
            .as_mut_slice(),
    )
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
