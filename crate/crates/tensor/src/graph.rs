//! Reverse-mode autodiff over an eagerly evaluated tape.
//!
//! Every operation appends a node holding its output value and the indices
//! of its inputs. [`Graph::backward`] walks the tape in reverse, matching on
//! the op to apply the chain rule. Values are kept for the whole life of the
//! graph, so backward passes can recompute whatever statistics they need
//! (norm denominators, softmax outputs) without separate caches.
//!
//! Non-differentiable inputs (images, adjacency masks, noise draws) enter as
//! plain leaves; parameters enter via [`Graph::param`] with a trainable flag,
//! and frozen parameters simply produce no gradient entry.

use std::collections::BTreeMap;
use std::fmt;

use crate::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// y = scale * x + shift; only the scale matters for backward.
    Affine { x: usize, scale: f64 },
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    LeakyRelu { x: usize, slope: f64 },
    Elu(usize),
    Abs(usize),
    /// Elementwise max; ties route the gradient to the first input.
    Max(usize, usize),
    /// Elementwise min; ties route the gradient to the first input.
    Min(usize, usize),
    SoftmaxRows(usize),
    /// Row softmax over kept entries; fully masked rows map to all-zero rows.
    /// Masked outputs are exactly zero, so backward reuses the softmax VJP.
    MaskedSoftmaxRows(usize),
    LayerNormRows { x: usize, gain: usize, bias: usize },
    ChannelNorm { x: usize, gain: usize, bias: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Upsample2x(usize),
    Concat { dim: usize, xs: Vec<usize> },
    Slice { x: usize, dim: usize, start: usize, len: usize },
    Reshape(usize),
    /// (N, d) token matrix -> (d, h, w) grid, token i at (i / w, i % w).
    TokensToGrid { x: usize, h: usize, w: usize },
    /// (d, h, w) grid -> (h*w, d) token matrix.
    GridToTokens(usize),
    SumAll(usize),
    MeanAll(usize),
    /// (n, d) + (d,) broadcast over rows.
    AddRowVec { x: usize, v: usize },
    /// (c, h, w) + (c,) broadcast over each channel plane.
    AddChanVec { x: usize, v: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GradError {
    NonScalarLoss { shape: Vec<usize> },
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {:?}", shape)
            }
        }
    }
}

impl std::error::Error for GradError {}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Anonymous trainable leaf (used by gradient tests).
    pub fn leaf_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named parameter leaf. Frozen parameters participate in the forward
    /// pass but are excluded from the gradient table.
    pub fn param(&mut self, name: &str, t: Tensor, trainable: bool) -> Var {
        let v = self.push(t, Op::Leaf, trainable);
        if trainable {
            self.params.push((name.to_string(), v));
        }
        v
    }

    /// Re-enter a computed value as a constant (gradient barrier).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.leaf(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).add(self.value(b));
        let rg = self.needs(&[a.0, b.0]);
        self.push(t, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).sub(self.value(b));
        let rg = self.needs(&[a.0, b.0]);
        self.push(t, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.needs(&[a.0, b.0]);
        self.push(t, Op::Mul(a.0, b.0), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), |x, y| x / y);
        let rg = self.needs(&[a.0, b.0]);
        self.push(t, Op::Div(a.0, b.0), rg)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let rg = self.needs(&[x.0]);
        self.push(t, Op::Affine { x: x.0, scale }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        let rg = self.needs(&[a.0, b.0]);
        self.push(t, Op::MatMul(a.0, b.0), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let rg = self.needs(&[x.0]);
        self.push(t, Op::Transpose(x.0), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(&[x.0]);
        self.push(t, Op::Relu(x.0), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.needs(&[x.0]);
        self.push(t, Op::LeakyRelu { x: x.0, slope }, rg)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        let rg = self.needs(&[x.0]);
        self.push(t, Op::Elu(x.0), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        let rg = self.needs(&[x.0]);
        self.push(t, Op::Abs(x.0), rg)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), f64::max);
        let rg = self.needs(&[a.0, b.0]);
        self.push(t, Op::Max(a.0, b.0), rg)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), f64::min);
        let rg = self.needs(&[a.0, b.0]);
        self.push(t, Op::Min(a.0, b.0), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = softmax_rows_value(self.value(x));
        let rg = self.needs(&[x.0]);
        self.push(t, Op::SoftmaxRows(x.0), rg)
    }

    /// Row softmax where `keep[i*cols + j] == false` zeroes entry (i, j).
    /// A row with no kept entries becomes the all-zero row.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        assert_eq!(keep.len(), xv.len(), "mask length mismatch");
        let t = masked_softmax_rows_value(xv, keep);
        let rg = self.needs(&[x.0]);
        self.push(t, Op::MaskedSoftmaxRows(x.0), rg)
    }

    /// Per-row layer norm with learned gain/bias of length `cols`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let d = xv.cols();
        assert_eq!(self.value(gain).shape(), &[d]);
        assert_eq!(self.value(bias).shape(), &[d]);
        let t = layer_norm_rows_value(xv, self.value(gain), self.value(bias));
        let rg = self.needs(&[x.0, gain.0, bias.0]);
        self.push(t, Op::LayerNormRows { x: x.0, gain: gain.0, bias: bias.0 }, rg)
    }

    /// Per-channel normalization of a (c, h, w) map over its h*w plane,
    /// with learned per-channel gain/bias.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3);
        let c = xv.shape()[0];
        assert_eq!(self.value(gain).shape(), &[c]);
        assert_eq!(self.value(bias).shape(), &[c]);
        let t = channel_norm_value(xv, self.value(gain), self.value(bias));
        let rg = self.needs(&[x.0, gain.0, bias.0]);
        self.push(t, Op::ChannelNorm { x: x.0, gain: gain.0, bias: bias.0 }, rg)
    }

    /// 2D convolution over a (c_in, h, w) map with weights (c_out, c_in, k, k)
    /// and per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let t = conv2d_value(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.needs(&[x.0, w.0, b.0]);
        self.push(t, Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad }, rg)
    }

    /// Nearest-neighbor 2x spatial upsample of a (c, h, w) map.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv.at3(ch, y, xx);
                    out.set3(ch, 2 * y, 2 * xx, v);
                    out.set3(ch, 2 * y, 2 * xx + 1, v);
                    out.set3(ch, 2 * y + 1, 2 * xx, v);
                    out.set3(ch, 2 * y + 1, 2 * xx + 1, v);
                }
            }
        }
        let rg = self.needs(&[x.0]);
        self.push(out, Op::Upsample2x(x.0), rg)
    }

    /// Concatenate along `dim`; all other dims must match.
    pub fn concat(&mut self, dim: usize, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rank = self.value(xs[0]).rank();
        assert!(dim < rank);
        let mut out_shape = self.value(xs[0]).shape().to_vec();
        out_shape[dim] = 0;
        for &x in xs {
            let s = self.value(x).shape();
            assert_eq!(s.len(), rank, "concat rank mismatch");
            for d in 0..rank {
                if d != dim {
                    assert_eq!(s[d], out_shape[d], "concat shape mismatch");
                }
            }
            out_shape[dim] += s[dim];
        }
        let outer: usize = out_shape[..dim].iter().product();
        let inner: usize = out_shape[dim + 1..].iter().product();
        let total_axis = out_shape[dim];
        let mut out = Tensor::zeros(&out_shape);
        let mut axis_off = 0usize;
        for &x in xs {
            let xv = self.value(x);
            let alen = xv.shape()[dim];
            for o in 0..outer {
                for a in 0..alen {
                    let src = (o * alen + a) * inner;
                    let dst = (o * total_axis + axis_off + a) * inner;
                    out.data_mut()[dst..dst + inner]
                        .copy_from_slice(&xv.data()[src..src + inner]);
                }
            }
            axis_off += alen;
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.needs(&ids);
        self.push(out, Op::Concat { dim, xs: ids }, rg)
    }

    /// Contiguous slice `[start, start+len)` along `dim`.
    pub fn slice(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let rank = xv.rank();
        assert!(dim < rank);
        assert!(start + len <= xv.shape()[dim], "slice out of range");
        let mut out_shape = xv.shape().to_vec();
        out_shape[dim] = len;
        let outer: usize = xv.shape()[..dim].iter().product();
        let inner: usize = xv.shape()[dim + 1..].iter().product();
        let axis = xv.shape()[dim];
        let mut out = Tensor::zeros(&out_shape);
        for o in 0..outer {
            for a in 0..len {
                let src = (o * axis + start + a) * inner;
                let dst = (o * len + a) * inner;
                out.data_mut()[dst..dst + inner].copy_from_slice(&xv.data()[src..src + inner]);
            }
        }
        let rg = self.needs(&[x.0]);
        self.push(out, Op::Slice { x: x.0, dim, start, len }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).reshaped(shape);
        let rg = self.needs(&[x.0]);
        self.push(t, Op::Reshape(x.0), rg)
    }

    /// (h*w, d) token matrix to (d, h, w) grid; token i sits at (i / w, i % w).
    pub fn tokens_to_grid(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        assert_eq!(xv.rows(), h * w, "token count != h*w");
        let d = xv.cols();
        let mut out = Tensor::zeros(&[d, h, w]);
        for i in 0..h * w {
            for c in 0..d {
                out.set3(c, i / w, i % w, xv.at2(i, c));
            }
        }
        let rg = self.needs(&[x.0]);
        self.push(out, Op::TokensToGrid { x: x.0, h, w }, rg)
    }

    /// (d, h, w) grid back to (h*w, d) tokens. Inverse of `tokens_to_grid`.
    pub fn grid_to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3);
        let (d, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(&[h * w, d]);
        for c in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    out.set2(y * w + xx, c, xv.at3(c, y, xx));
                }
            }
        }
        let rg = self.needs(&[x.0]);
        self.push(out, Op::GridToTokens(x.0), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x.0]);
        self.push(t, Op::SumAll(x.0), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let rg = self.needs(&[x.0]);
        self.push(t, Op::MeanAll(x.0), rg)
    }

    /// (n, d) + (d,) row-broadcast add.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        assert_eq!(xv.rank(), 2);
        assert_eq!(vv.shape(), &[xv.cols()]);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] += vv.data()[j];
            }
        }
        let rg = self.needs(&[x.0, v.0]);
        self.push(out, Op::AddRowVec { x: x.0, v: v.0 }, rg)
    }

    /// (c, h, w) + (c,) channel-broadcast add.
    pub fn add_chan_vec(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        assert_eq!(xv.rank(), 3);
        assert_eq!(vv.shape(), &[xv.shape()[0]]);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = xv.clone();
        for ch in 0..c {
            let b = vv.data()[ch];
            for i in 0..h * w {
                out.data_mut()[ch * h * w + i] += b;
            }
        }
        let rg = self.needs(&[x.0, v.0]);
        self.push(out, Op::AddChanVec { x: x.0, v: v.0 }, rg)
    }

    /// Reverse pass from a scalar loss. Returns d(loss)/d(node) for every
    /// node that requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GradError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Gradients of named parameters, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            if let Some(g) = grads.of(*var) {
                // The same parameter may be re-entered on one tape (e.g.
                // shared encoder weights applied to both modalities).
                out.entry(name.clone())
                    .and_modify(|acc: &mut Tensor| *acc = acc.add(g))
                    .or_insert_with(|| g.clone());
            }
        }
        out
    }

    /// Hash of which side every activation switching point sits on:
    /// relu/leaky-relu/abs input signs and max/min winners. Two forward
    /// passes of the same computation with equal signatures lie on one
    /// smooth piece of the function, which is the precondition for a
    /// central difference to estimate a derivative at all.
    pub fn switch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bit: bool| {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(0x100000001b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu { x, .. } | Op::Abs(x) => {
                    for &v in self.nodes[*x].value.data() {
                        feed(v >= 0.0);
                    }
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    for i in 0..av.len() {
                        feed(av[i] >= bv[i]);
                    }
                }
                _ => {}
            }
        }
        h
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.zip(&self.nodes[*b].value, |gv, bv| gv * bv));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.zip(&self.nodes[*a].value, |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if needs(*a) {
                    accumulate(grads, *a, g.zip(bv, |gv, b| gv / b));
                }
                if needs(*b) {
                    let mut t = Tensor::zeros(bv.shape());
                    for i in 0..t.len() {
                        t.data_mut()[i] = -g.data()[i] * av.data()[i] / (bv.data()[i] * bv.data()[i]);
                    }
                    accumulate(grads, *b, t);
                }
            }
            Op::Affine { x, scale, .. } => {
                if needs(*x) {
                    accumulate(grads, *x, g.scale(*scale));
                }
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if needs(*a) {
                    accumulate(grads, *a, g.matmul(&bv.transpose()));
                }
                if needs(*b) {
                    accumulate(grads, *b, av.transpose().matmul(g));
                }
            }
            Op::Transpose(x) => {
                if needs(*x) {
                    accumulate(grads, *x, g.transpose());
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let xv = &self.nodes[*x].value;
                    accumulate(grads, *x, g.zip(xv, |gv, x| if x > 0.0 { gv } else { 0.0 }));
                }
            }
            Op::LeakyRelu { x, slope } => {
                if needs(*x) {
                    let xv = &self.nodes[*x].value;
                    let s = *slope;
                    accumulate(grads, *x, g.zip(xv, |gv, x| if x > 0.0 { gv } else { s * gv }));
                }
            }
            Op::Elu(x) => {
                if needs(*x) {
                    let xv = &self.nodes[*x].value;
                    accumulate(grads, *x, g.zip(xv, |gv, x| if x > 0.0 { gv } else { gv * x.exp() }));
                }
            }
            Op::Abs(x) => {
                if needs(*x) {
                    let xv = &self.nodes[*x].value;
                    accumulate(
                        grads,
                        *x,
                        g.zip(xv, |gv, x| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 }),
                    );
                }
            }
            Op::Max(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if needs(*a) {
                    let mut t = Tensor::zeros(av.shape());
                    for i in 0..t.len() {
                        if av.data()[i] >= bv.data()[i] {
                            t.data_mut()[i] = g.data()[i];
                        }
                    }
                    accumulate(grads, *a, t);
                }
                if needs(*b) {
                    let mut t = Tensor::zeros(bv.shape());
                    for i in 0..t.len() {
                        if av.data()[i] < bv.data()[i] {
                            t.data_mut()[i] = g.data()[i];
                        }
                    }
                    accumulate(grads, *b, t);
                }
            }
            Op::Min(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if needs(*a) {
                    let mut t = Tensor::zeros(av.shape());
                    for i in 0..t.len() {
                        if av.data()[i] <= bv.data()[i] {
                            t.data_mut()[i] = g.data()[i];
                        }
                    }
                    accumulate(grads, *a, t);
                }
                if needs(*b) {
                    let mut t = Tensor::zeros(bv.shape());
                    for i in 0..t.len() {
                        if av.data()[i] > bv.data()[i] {
                            t.data_mut()[i] = g.data()[i];
                        }
                    }
                    accumulate(grads, *b, t);
                }
            }
            Op::SoftmaxRows(x) => {
                if needs(*x) {
                    let y = &self.nodes[idx].value;
                    accumulate(grads, *x, softmax_rows_backward(y, g));
                }
            }
            Op::MaskedSoftmaxRows(x) => {
                if needs(*x) {
                    let y = &self.nodes[idx].value;
                    accumulate(grads, *x, softmax_rows_backward(y, g));
                }
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let (n, d) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgain = Tensor::zeros(&[d]);
                let mut dbias = Tensor::zeros(&[d]);
                for i in 0..n {
                    let row = &xv.data()[i * d..(i + 1) * d];
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let (xhat, inv_sigma) = normalize_row(row);
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dxhat[j] = grow[j] * gv.data()[j];
                        dgain.data_mut()[j] += grow[j] * xhat[j];
                        dbias.data_mut()[j] += grow[j];
                    }
                    let m1: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx.data_mut()[i * d + j] = inv_sigma * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*gain) {
                    accumulate(grads, *gain, dgain);
                }
                if needs(*bias) {
                    accumulate(grads, *bias, dbias);
                }
            }
            Op::ChannelNorm { x, gain, bias } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                let mut dgain = Tensor::zeros(&[c]);
                let mut dbias = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let row = &xv.data()[ch * plane..(ch + 1) * plane];
                    let grow = &g.data()[ch * plane..(ch + 1) * plane];
                    let (xhat, inv_sigma) = normalize_row(row);
                    let gc = gv.data()[ch];
                    let mut dxhat = vec![0.0; plane];
                    for j in 0..plane {
                        dxhat[j] = grow[j] * gc;
                        dgain.data_mut()[ch] += grow[j] * xhat[j];
                        dbias.data_mut()[ch] += grow[j];
                    }
                    let m1: f64 = dxhat.iter().sum::<f64>() / plane as f64;
                    let m2: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                    for j in 0..plane {
                        dx.data_mut()[ch * plane + j] = inv_sigma * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*gain) {
                    accumulate(grads, *gain, dgain);
                }
                if needs(*bias) {
                    accumulate(grads, *bias, dbias);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (dx, dw, db) = conv2d_backward(xv, wv, g, *stride, *pad);
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*w) {
                    accumulate(grads, *w, dw);
                }
                if needs(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Upsample2x(x) => {
                if needs(*x) {
                    let xv = &self.nodes[*x].value;
                    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let gv = g.at3(ch, y, xx);
                                let cur = dx.at3(ch, y / 2, xx / 2);
                                dx.set3(ch, y / 2, xx / 2, cur + gv);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Concat { dim, xs } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = out_shape[..*dim].iter().product();
                let inner: usize = out_shape[*dim + 1..].iter().product();
                let total_axis = out_shape[*dim];
                let mut axis_off = 0usize;
                for &xi in xs {
                    let alen = self.nodes[xi].value.shape()[*dim];
                    if needs(xi) {
                        let mut dx = Tensor::zeros(self.nodes[xi].value.shape());
                        for o in 0..outer {
                            for a in 0..alen {
                                let src = (o * total_axis + axis_off + a) * inner;
                                let dst = (o * alen + a) * inner;
                                dx.data_mut()[dst..dst + inner]
                                    .copy_from_slice(&g.data()[src..src + inner]);
                            }
                        }
                        accumulate(grads, xi, dx);
                    }
                    axis_off += alen;
                }
            }
            Op::Slice { x, dim, start, len } => {
                if needs(*x) {
                    let xv = &self.nodes[*x].value;
                    let outer: usize = xv.shape()[..*dim].iter().product();
                    let inner: usize = xv.shape()[*dim + 1..].iter().product();
                    let axis = xv.shape()[*dim];
                    let mut dx = Tensor::zeros(xv.shape());
                    for o in 0..outer {
                        for a in 0..*len {
                            let dst = (o * axis + start + a) * inner;
                            let src = (o * len + a) * inner;
                            dx.data_mut()[dst..dst + inner]
                                .copy_from_slice(&g.data()[src..src + inner]);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    accumulate(grads, *x, g.reshaped(self.nodes[*x].value.shape()));
                }
            }
            Op::TokensToGrid { x, h, w } => {
                if needs(*x) {
                    let d = self.nodes[*x].value.cols();
                    let mut dx = Tensor::zeros(&[h * w, d]);
                    for i in 0..h * w {
                        for c in 0..d {
                            dx.set2(i, c, g.at3(c, i / w, i % w));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GridToTokens(x) => {
                if needs(*x) {
                    let xv = &self.nodes[*x].value;
                    let (d, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let mut dx = Tensor::zeros(&[d, h, w]);
                    for c in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                dx.set3(c, y, xx, g.at2(y * w + xx, c));
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SumAll(x) => {
                if needs(*x) {
                    let s = g.item();
                    accumulate(grads, *x, Tensor::full(self.nodes[*x].value.shape(), s));
                }
            }
            Op::MeanAll(x) => {
                if needs(*x) {
                    let n = self.nodes[*x].value.len() as f64;
                    let s = g.item() / n;
                    accumulate(grads, *x, Tensor::full(self.nodes[*x].value.shape(), s));
                }
            }
            Op::AddRowVec { x, v } => {
                if needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if needs(*v) {
                    let (n, d) = (g.rows(), g.cols());
                    let mut dv = Tensor::zeros(&[d]);
                    for i in 0..n {
                        for j in 0..d {
                            dv.data_mut()[j] += g.at2(i, j);
                        }
                    }
                    accumulate(grads, *v, dv);
                }
            }
            Op::AddChanVec { x, v } => {
                if needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if needs(*v) {
                    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                    let mut dv = Tensor::zeros(&[c]);
                    for ch in 0..c {
                        for i in 0..h * w {
                            dv.data_mut()[ch] += g.data()[ch * h * w + i];
                        }
                    }
                    accumulate(grads, *v, dv);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, t: Tensor) {
    match &mut grads[idx] {
        Some(existing) => *existing = existing.add(&t),
        slot @ None => *slot = Some(t),
    }
}

fn softmax_rows_value(x: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 2);
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..d {
            let e = (row[j] - m).exp();
            out.data_mut()[i * d + j] = e;
            sum += e;
        }
        for j in 0..d {
            out.data_mut()[i * d + j] /= sum;
        }
    }
    out
}

fn masked_softmax_rows_value(x: &Tensor, keep: &[bool]) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let krow = &keep[i * d..(i + 1) * d];
        let mut m = f64::NEG_INFINITY;
        for j in 0..d {
            if krow[j] && row[j] > m {
                m = row[j];
            }
        }
        if m == f64::NEG_INFINITY {
            continue; // fully masked row stays all-zero
        }
        let mut sum = 0.0;
        for j in 0..d {
            if krow[j] {
                let e = (row[j] - m).exp();
                out.data_mut()[i * d + j] = e;
                sum += e;
            }
        }
        for j in 0..d {
            out.data_mut()[i * d + j] /= sum;
        }
    }
    out
}

/// VJP of a row softmax: dx = y * (g - sum(g * y)) per row.
fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let (n, d) = (y.rows(), y.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let yrow = &y.data()[i * d..(i + 1) * d];
        let grow = &g.data()[i * d..(i + 1) * d];
        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        for j in 0..d {
            dx.data_mut()[i * d + j] = yrow[j] * (grow[j] - dot);
        }
    }
    dx
}

const NORM_EPS: f64 = 1e-6;

/// Returns (normalized values, 1/sigma) for one normalization group.
fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_sigma = 1.0 / (var + NORM_EPS).sqrt();
    (row.iter().map(|v| (v - mean) * inv_sigma).collect(), inv_sigma)
}

fn layer_norm_rows_value(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let (xhat, _) = normalize_row(&x.data()[i * d..(i + 1) * d]);
        for j in 0..d {
            out.data_mut()[i * d + j] = gain.data()[j] * xhat[j] + bias.data()[j];
        }
    }
    out
}

fn channel_norm_value(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let (xhat, _) = normalize_row(&x.data()[ch * plane..(ch + 1) * plane]);
        for j in 0..plane {
            out.data_mut()[ch * plane + j] = gain.data()[ch] * xhat[j] + bias.data()[ch];
        }
    }
    out
}

fn conv2d_value(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    assert_eq!(x.rank(), 3, "conv input must be (c, h, w)");
    assert_eq!(w.rank(), 4, "conv weight must be (c_out, c_in, k, k)");
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin2, "conv channel mismatch");
    assert_eq!(b.shape(), &[cout]);
    assert!(stride >= 1);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at4(o, c, ky, kx) * x.at3(c, iy as usize, ix as usize);
                        }
                    }
                }
                out.set3(o, oy, ox, acc);
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g.at3(o, oy, ox);
                if gv == 0.0 {
                    continue;
                }
                db.data_mut()[o] += gv;
                for c in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            let dwi = ((o * cin + c) * kh + ky) * kw + kx;
                            dw.data_mut()[dwi] += gv * x.at3(c, iy, ix);
                            let dxi = (c * h + iy) * wd + ix;
                            dx.data_mut()[dxi] += gv * w.at4(o, c, ky, kx);
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

impl Tensor {
    #[inline]
    fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let s = self.shape();
        self.data()[((a * s[1] + b) * s[2] + c) * s[3] + d]
    }
}
