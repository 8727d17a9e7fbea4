//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends one node to the [`Tape`]; nodes only reference earlier
//! nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep. Leaf gradients accumulate
//! across calls until [`Tape::zero_grads`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward, Conv2dSpec};
use crate::ops::resample::{bilinear_resize_backward, bilinear_sample_backward};
use crate::ops::{bilinear_resize, bilinear_sample, conv2d};
use crate::params::ParamStore;
use crate::tensor::{split_axis, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    Resize { x: Var },
    Sample { value: Var, points: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Matmul { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    Sigmoid { x: Var },
    Gelu { x: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    MulChannel { x: Var, s: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GlobalAvgPool { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, axis: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Sum { x: Var },
    PointWeightedSum { samples: Var, weights: Var },
    SoftDice { logits: Var, target: Vec<usize>, eps: f64, per_sample: bool, probs: Tensor },
    CrossEntropy { logits: Var, target: Vec<usize>, probs: Tensor },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, b, .. } | Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Sample { value, points } => vec![*value, *points],
            Matmul { a, b } | Add { a, b } | Mul { a, b } => vec![*a, *b],
            MulChannel { x, s } => vec![*x, *s],
            Concat { xs, .. } => xs.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            PointWeightedSum { samples, weights } => vec![*samples, *weights],
            SoftDice { logits, .. } | CrossEntropy { logits, .. } => vec![*logits],
            Resize { x }
            | Softmax { x, .. }
            | Sigmoid { x }
            | Gelu { x }
            | Relu { x }
            | Scale { x, .. }
            | AddScalar { x }
            | Narrow { x, .. }
            | GlobalAvgPool { x }
            | Reshape { x }
            | Permute { x, .. }
            | Sum { x } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded computation graph plus leaf gradient accumulators.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", t.shape())));
    }
    Ok(())
}

fn check_labels(target: &[usize], num_classes: usize) -> Result<()> {
    match target.iter().find(|&&t| t >= num_classes) {
        Some(&t) => Err(Error::LabelRange { label: t as i64, num_classes }),
        None => Ok(()),
    }
}

fn softmax_classes(logits: &Tensor) -> Tensor {
    // logits [B, C, ...] -> softmax along axis 1
    softmax_forward(logits, 1)
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..n {
                let e = (xd[idx(k)] - m).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..n {
                out[idx(k)] /= s;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Gradient w.r.t. softmax input given output `y` and upstream `g`.
fn softmax_backward(y: &Tensor, g: &[f64], axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let yd = y.data();
    let mut gx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| yd[idx(k)] * g[idx(k)]).sum();
            for k in 0..n {
                gx[idx(k)] = yd[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(xd[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// Soft Dice per (group, class): returns (intersection, union) sums where a
/// group is one sample (per-sample mode) or the whole batch.
fn dice_sums(probs: &Tensor, target: &[usize], per_sample: bool) -> (usize, Vec<f64>, Vec<f64>) {
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    let hw: usize = probs.shape()[2..].iter().product();
    let groups = if per_sample { b } else { 1 };
    let mut inter = vec![0.0; groups * c];
    let mut union = vec![0.0; groups * c];
    let pd = probs.data();
    for bi in 0..b {
        let gi = if per_sample { bi } else { 0 };
        for k in 0..c {
            let plane = &pd[(bi * c + k) * hw..][..hw];
            let tgt = &target[bi * hw..][..hw];
            let (mut i_acc, mut u_acc) = (0.0, 0.0);
            for (p, &t) in plane.iter().zip(tgt) {
                let g = if t == k { 1.0 } else { 0.0 };
                i_acc += p * g;
                u_acc += p + g;
            }
            inter[gi * c + k] += i_acc;
            union[gi * c + k] += u_acc;
        }
    }
    (groups, inter, union)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Binds the named parameter from `store`. Repeated calls with the same
    /// name return the same node, so a shared weight sees the sum of all its
    /// uses in backward. Frozen entries become constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = if entry.trainable {
            self.leaf(entry.value.clone())
        } else {
            self.constant(entry.value.clone())
        };
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes `tape.param(_, name)` resolve to `var` from now on; used to
    /// drive a module with externally supplied (e.g. perturbed) weights.
    pub fn bind_param(&mut self, name: &str, var: Var) {
        self.params.insert(name.to_string(), var);
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- ops ---------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::Resize { x }))
    }

    pub fn bilinear_sample(&mut self, value: Var, points: Var) -> Result<Var> {
        let out = bilinear_sample(self.value(value), self.value(points))?;
        Ok(self.push(out, Op::Sample { value, points }))
    }

    /// Affine map over the last axis: `x @ w^T + b`, `w` is [Dout, Din].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let din = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::shape("linear", format!("weight {ws:?} does not accept Din={din}")));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [{dout}]", self.value(b).shape()),
                ));
            }
        }
        let rows = self.value(x).numel() / din;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            let xr = &xd[r * din..][..din];
            for o in 0..dout {
                let wr = &wd[o * din..][..din];
                out[r * dout + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                for (v, bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }))
    }

    /// Batched matrix product `[..., M, K] x [..., K, N]`; leading dims must match.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("batch dims differ: {sa:?} vs {sb:?}")));
        }
        let nd = sa.len();
        let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
        if sb[nd - 2] != k {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {}", sb[nd - 2])));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let out = batched_matmul(self.value(a).data(), self.value(b).data(), batch, m, k, n, false, false);
        let mut shape = sa;
        shape[nd - 1] = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Matmul { a, b }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.value(x), axis)?;
        let out = softmax_forward(self.value(x), axis);
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(out, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar { x })
    }

    /// `x[b, c, ...] * s[b, c]`, broadcasting `s` over the trailing axes.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ss = self.value(s).shape();
        if xs.len() < 2 || ss != &xs[..2] {
            return Err(Error::shape("mul_channel", format!("scale {ss:?} does not match {xs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let sd = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(inner)
            .zip(sd)
            .flat_map(|(row, &sv)| row.iter().map(move |v| v * sv))
            .collect();
        let out = Tensor::from_parts(xs.to_vec(), data);
        Ok(self.push(out, Op::MulChannel { x, s }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        check_axis("concat", self.value(xs[0]), axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d])
            {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axis("narrow", self.value(x), axis)?;
        let s = self.value(x).shape().to_vec();
        if len == 0 || start + len > s[axis] {
            return Err(Error::shape("narrow", format!("range {start}..{} exceeds dim {}", start + len, s[axis])));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Narrow { x, axis, start }))
    }

    /// [B,C,H,W] -> [B,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected [B,C,H,W], got {s:?}")));
        }
        let hw = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![s[0], s[1]], data), Op::GlobalAvgPool { x }))
    }

    /// Normalizes to zero mean and unit variance along `axis`, then applies
    /// per-position `gain` and `bias` (both shaped `[len(axis)]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        check_axis("layer_norm", self.value(x), axis)?;
        let s = self.value(x).shape().to_vec();
        let (outer, n, inner) = split_axis(&s, axis);
        for v in [gain, bias] {
            if self.value(v).shape() != [n] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine param {:?}, expected [{n}]", self.value(v).shape()),
                ));
            }
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; xd.len()];
        let mut mean = vec![0.0; outer * inner];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[idx(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (xd[idx(k)] - m).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                for k in 0..n {
                    out[idx(k)] = (xd[idx(k)] - m) * r * gd[k] + bd[k];
                }
                mean[o * inner + i] = m;
                rstd[o * inner + i] = r;
            }
        }
        let t = Tensor::from_parts(s, out);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, axis, mean, rstd }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.value(x).ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {nd} axes")));
        }
        let out = permute_data(self.value(x), perm);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// `samples` [N,C,P,K] weighted by `weights` [N,P,K] and reduced over K.
    pub fn point_weighted_sum(&mut self, samples: Var, weights: Var) -> Result<Var> {
        let ss = self.value(samples).shape().to_vec();
        let ws = self.value(weights).shape();
        if ss.len() != 4 || ws != [ss[0], ss[2], ss[3]] {
            return Err(Error::shape(
                "point_weighted_sum",
                format!("samples {ss:?} vs weights {ws:?}"),
            ));
        }
        let (n, c, p, k) = (ss[0], ss[1], ss[2], ss[3]);
        let sd = self.value(samples).data();
        let wd = self.value(weights).data();
        let mut out = vec![0.0; n * c * p];
        for ni in 0..n {
            for ci in 0..c {
                for pi in 0..p {
                    let srow = &sd[((ni * c + ci) * p + pi) * k..][..k];
                    let wrow = &wd[(ni * p + pi) * k..][..k];
                    out[(ni * c + ci) * p + pi] = srow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c, p], out);
        Ok(self.push(t, Op::PointWeightedSum { samples, weights }))
    }

    /// Soft Dice loss `1 - mean_c d_c` over softmax posteriors of `logits`
    /// ([B,C,...]) against integer `target` ([B,...] flattened). With
    /// `per_sample`, d is computed per sample and averaged over samples too;
    /// otherwise sums run jointly over the batch.
    pub fn soft_dice_loss(&mut self, logits: Var, target: &[usize], eps: f64, per_sample: bool) -> Result<Var> {
        let lt = self.value(logits);
        check_loss_shapes("soft_dice_loss", lt.shape(), target.len())?;
        check_labels(target, lt.shape()[1])?;
        let probs = softmax_classes(lt);
        let c = lt.shape()[1];
        let (groups, inter, union) = dice_sums(&probs, target, per_sample);
        let mean_d = inter
            .iter()
            .zip(&union)
            .map(|(i, u)| (2.0 * i + eps) / (u + eps))
            .sum::<f64>()
            / (groups * c) as f64;
        let op = Op::SoftDice { logits, target: target.to_vec(), eps, per_sample, probs };
        Ok(self.push(Tensor::scalar(1.0 - mean_d), op))
    }

    /// Mean over pixels of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        check_loss_shapes("cross_entropy", lt.shape(), target.len())?;
        check_labels(target, lt.shape()[1])?;
        let (b, c) = (lt.shape()[0], lt.shape()[1]);
        let hw = lt.numel() / (b * c);
        let ld = lt.data();
        let mut total = 0.0;
        for bi in 0..b {
            for px in 0..hw {
                let at = |k: usize| ld[(bi * c + k) * hw + px];
                let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|k| (at(k) - m).exp()).sum::<f64>().ln();
                total += lse - at(target[bi * hw + px]);
            }
        }
        let probs = softmax_classes(lt);
        let loss = total / (b * hw) as f64;
        let op = Op::CrossEntropy { logits, target: target.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    // ---- backward ------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every reachable differentiable leaf and
    /// adds it to that leaf's accumulator.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.vjp(i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let cg = conv2d_backward(self.value(*x), self.value(*w), g, *spec, need);
                res.extend(cg.x.map(|t| (*x, t)));
                res.extend(cg.w.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, cg.b) {
                    res.push((*b, t));
                }
            }
            Op::Resize { x } => {
                res.push((*x, bilinear_resize_backward(g, self.value(*x).shape())));
            }
            Op::Sample { value, points } => {
                let need = (self.needs(*value), self.needs(*points));
                let (gv, gp) = bilinear_sample_backward(self.value(*value), self.value(*points), g, need);
                res.extend(gv.map(|t| (*value, t)));
                res.extend(gp.map(|t| (*points, t)));
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (dout, din) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.numel() / din;
                if self.needs(*x) {
                    let gx = batched_matmul(gd, wt.data(), 1, rows, dout, din, false, false);
                    res.push((*x, Tensor::from_parts(xt.shape().to_vec(), gx)));
                }
                if self.needs(*w) {
                    let gw = batched_matmul(gd, xt.data(), 1, dout, rows, din, true, false);
                    res.push((*w, Tensor::from_parts(wt.shape().to_vec(), gw)));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut gb = vec![0.0; dout];
                    for row in gd.chunks_exact(dout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    res.push((b, Tensor::from_parts(vec![dout], gb)));
                }
            }
            Op::Matmul { a, b } => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let nd = at.ndim();
                let (m, k, n) = (at.shape()[nd - 2], at.shape()[nd - 1], bt.shape()[nd - 1]);
                let batch = at.numel() / (m * k);
                if self.needs(*a) {
                    // gA = g @ B^T
                    let ga = batched_matmul(gd, bt.data(), batch, m, n, k, false, true);
                    res.push((*a, Tensor::from_parts(at.shape().to_vec(), ga)));
                }
                if self.needs(*b) {
                    // gB = A^T @ g
                    let gb = batched_matmul(at.data(), gd, batch, k, m, n, true, false);
                    res.push((*b, Tensor::from_parts(bt.shape().to_vec(), gb)));
                }
            }
            Op::Softmax { x, axis } => res.push((*x, softmax_backward(out, gd, *axis))),
            Op::Sigmoid { x } => {
                let data = out.data().iter().zip(gd).map(|(y, g)| g * y * (1.0 - y)).collect();
                res.push((*x, Tensor::from_parts(out.shape().to_vec(), data)));
            }
            Op::Gelu { x } => {
                let data = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, g)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                res.push((*x, Tensor::from_parts(out.shape().to_vec(), data)));
            }
            Op::Relu { x } => {
                let data = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, g)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                res.push((*x, Tensor::from_parts(out.shape().to_vec(), data)));
            }
            Op::Add { a, b } => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Mul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(bt.data()).map(|(g, y)| g * y).collect();
                    res.push((*a, Tensor::from_parts(at.shape().to_vec(), d)));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(at.data()).map(|(g, y)| g * y).collect();
                    res.push((*b, Tensor::from_parts(bt.shape().to_vec(), d)));
                }
            }
            Op::Scale { x, c } => res.push((*x, g.map(|v| v * c))),
            Op::AddScalar { x } => res.push((*x, g.clone())),
            Op::MulChannel { x, s } => {
                let (xt, st) = (self.value(*x), self.value(*s));
                let inner: usize = xt.shape()[2..].iter().product();
                if self.needs(*x) {
                    let d = gd
                        .chunks_exact(inner)
                        .zip(st.data())
                        .flat_map(|(row, &sv)| row.iter().map(move |v| v * sv))
                        .collect();
                    res.push((*x, Tensor::from_parts(xt.shape().to_vec(), d)));
                }
                if self.needs(*s) {
                    let d = gd
                        .chunks_exact(inner)
                        .zip(xt.data().chunks_exact(inner))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    res.push((*s, Tensor::from_parts(st.shape().to_vec(), d)));
                }
            }
            Op::Concat { xs, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let total = out.shape()[*axis];
                let mut offset = 0;
                for &v in xs {
                    let s = self.value(v).shape();
                    let chunk = s[*axis] * inner;
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total * inner + offset..][..chunk]);
                        }
                        res.push((v, Tensor::from_parts(s.to_vec(), d)));
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.value(*x).shape();
                let (outer, n, inner) = split_axis(s, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    d[(o * n + start) * inner..][..len * inner]
                        .copy_from_slice(&gd[o * len * inner..][..len * inner]);
                }
                res.push((*x, Tensor::from_parts(s.to_vec(), d)));
            }
            Op::GlobalAvgPool { x } => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
                res.push((*x, Tensor::from_parts(s.to_vec(), d)));
            }
            Op::LayerNorm { x, gain, bias, axis, mean, rstd } => {
                let xt = self.value(*x);
                let gn = self.value(*gain).data();
                let (outer, n, inner) = split_axis(xt.shape(), *axis);
                let xd = xt.data();
                let mut gx = vec![0.0; xd.len()];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let (m, r) = (mean[o * inner + i], rstd[o * inner + i]);
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for k in 0..n {
                            let xh = (xd[idx(k)] - m) * r;
                            let gh = gd[idx(k)] * gn[k];
                            sum_g += gh;
                            sum_gx += gh * xh;
                            ggain[k] += gd[idx(k)] * xh;
                            gbias[k] += gd[idx(k)];
                        }
                        let (mg, mgx) = (sum_g / n as f64, sum_gx / n as f64);
                        for k in 0..n {
                            let xh = (xd[idx(k)] - m) * r;
                            gx[idx(k)] = r * (gd[idx(k)] * gn[k] - mg - xh * mgx);
                        }
                    }
                }
                res.push((*x, Tensor::from_parts(xt.shape().to_vec(), gx)));
                res.push((*gain, Tensor::from_parts(vec![n], ggain)));
                res.push((*bias, Tensor::from_parts(vec![n], gbias)));
            }
            Op::Reshape { x } => {
                res.push((*x, Tensor::from_parts(self.value(*x).shape().to_vec(), gd.to_vec())));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                res.push((*x, permute_data(g, &inv)));
            }
            Op::Sum { x } => {
                res.push((*x, Tensor::full(self.value(*x).shape(), gd[0])));
            }
            Op::PointWeightedSum { samples, weights } => {
                let st = self.value(*samples);
                let wt = self.value(*weights);
                let &[n, c, p, k] = st.shape() else { unreachable!() };
                let (sd, wd) = (st.data(), wt.data());
                let mut gs = vec![0.0; sd.len()];
                let mut gw = vec![0.0; wd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for pi in 0..p {
                            let gv = gd[(ni * c + ci) * p + pi];
                            let sb = ((ni * c + ci) * p + pi) * k;
                            let wb = (ni * p + pi) * k;
                            for ki in 0..k {
                                gs[sb + ki] += gv * wd[wb + ki];
                                gw[wb + ki] += gv * sd[sb + ki];
                            }
                        }
                    }
                }
                res.push((*samples, Tensor::from_parts(st.shape().to_vec(), gs)));
                res.push((*weights, Tensor::from_parts(wt.shape().to_vec(), gw)));
            }
            Op::SoftDice { logits, target, eps, per_sample, probs } => {
                let (b, c) = (probs.shape()[0], probs.shape()[1]);
                let hw = probs.numel() / (b * c);
                let (groups, inter, union) = dice_sums(probs, target, *per_sample);
                let scale = -gd[0] / (groups * c) as f64;
                let pd = probs.data();
                let mut dp = vec![0.0; pd.len()];
                for bi in 0..b {
                    let gi = if *per_sample { bi } else { 0 };
                    for k in 0..c {
                        let (iv, uv) = (inter[gi * c + k], union[gi * c + k]);
                        let den = uv + eps;
                        let num = 2.0 * iv + eps;
                        let a = 2.0 / den;
                        let bterm = num / (den * den);
                        for px in 0..hw {
                            let gt = if target[bi * hw + px] == k { 1.0 } else { 0.0 };
                            dp[(bi * c + k) * hw + px] = scale * (a * gt - bterm);
                        }
                    }
                }
                res.push((*logits, softmax_backward(probs, &dp, 1)));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let (b, c) = (probs.shape()[0], probs.shape()[1]);
                let hw = probs.numel() / (b * c);
                let scale = gd[0] / (b * hw) as f64;
                let mut d: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                for bi in 0..b {
                    for px in 0..hw {
                        d[(bi * c + target[bi * hw + px]) * hw + px] -= scale;
                    }
                }
                res.push((*logits, Tensor::from_parts(probs.shape().to_vec(), d)));
            }
        }
        res
    }
}

fn check_loss_shapes(op: &'static str, logits: &[usize], target_len: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::shape(op, format!("logits must be [B,C,...], got {logits:?}")));
    }
    let expect = logits[0] * logits[2..].iter().product::<usize>();
    if expect != target_len {
        return Err(Error::shape(op, format!("target has {target_len} labels, logits {logits:?} need {expect}")));
    }
    Ok(())
}

/// `out[b] = op(A[b]) @ op(B[b])` with row-major operands; `ta`/`tb` mean the
/// stored matrix is the transpose of the logical operand. Logical shapes are
/// `[m, k] x [k, n]`.
#[allow(clippy::too_many_arguments)]
fn batched_matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = &a[bi * m * k..][..m * k];
        let bb = &b[bi * k * n..][..k * n];
        let ob = &mut out[bi * m * n..][..m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..][..n];
            for p in 0..k {
                let av = if ta { ab[p * m + i] } else { ab[i * k + p] };
                if tb {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o += av * bb[j * k + p];
                    }
                } else {
                    let brow = &bb[p * n..][..n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
    out
}
