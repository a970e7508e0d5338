use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matmul_nn, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    /// Position in recording order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary {
        a: Var,
        b: Var,
        kind: BinKind,
    },
    Affine {
        x: Var,
        mul: f64,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    Sigmoid(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        dlogits: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations on tensors so that a scalar result can be
/// differentiated with respect to every leaf.
///
/// A graph lives for one forward/backward pass. All ops are pure: the
/// result of an op is a new node, inputs are never mutated.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// (outer, axis length, inner) of a row-major shape split at `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let (shape, data) = if sa == sb {
            (sa.clone(), va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let ((ra, ca), (rb, cb)) = (dims2(&sa), dims2(&sb));
            let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
            if sa.len() > 2 || sb.len() > 2 || !ok(ra, rb) || !ok(ca, cb) {
                return Err(Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")));
            }
            let (r, c) = (ra.max(rb), ca.max(cb));
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    let x = va[(if ra == 1 { 0 } else { i }) * ca + if ca == 1 { 0 } else { j }];
                    let y = vb[(if rb == 1 { 0 } else { i }) * cb + if cb == 1 { 0 } else { j }];
                    out.push(f(x, y));
                }
            }
            (vec![r, c], out)
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, Op::Binary { a, b, kind }, rg, name)
    }

    /// Elementwise sum with row/column broadcasting for matrices.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul, "mul")
    }

    /// `mul * x + add`
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| mul * v + add).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, mul }, rg, "affine")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape("narrow", format!("{start}+{len} on axis {axis} of {s:?}")));
        }
        let (outer, alen, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, rg, "narrow")
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if self.shape(x).get(axis) != Some(&total) {
            return Err(Error::shape("split", format!("sizes {sizes:?} vs {:?}", self.shape(x))));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not a matrix")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg, "transpose")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - m).exp();
                    data[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    data[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(s, data)?, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// Row-wise softmax of a matrix where `keep[r * cols + c] == false`
    /// positions get probability exactly zero (a `-inf` logit).
    pub fn masked_softmax(&mut self, x: Var, keep: &Rc<Vec<bool>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (r, c) = dims2(&s);
        if keep.len() != r * c {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} for {s:?}", keep.len()),
            ));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let k = &keep[i * c..(i + 1) * c];
            let m = row
                .iter()
                .zip(k)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::DegenerateAttention { row: i });
            }
            let out = &mut data[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if k[j] {
                    out[j] = (row[j] - m).exp();
                    z += out[j];
                }
            }
            for v in out.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(s, data)?, Op::MaskedSoftmax { x }, rg, "masked_softmax")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect())?;
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect())?;
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t.shape());
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape("layer_norm", format!("gain/bias must have {c} elements")));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = t.data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Inverted dropout. The mask is drawn from a generator seeded with
    /// `seed`; with `train == false` or `rate == 0` this is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg, "dropout")
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = dims2(t.shape());
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id list"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::shape("embedding", format!("id {i} >= vocab {v}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Mean label-smoothed cross-entropy over the rows whose target is not
    /// `pad`. The smoothed target puts `1 - uncertainty` on the gold token
    /// and `uncertainty / (V - 1)` on every other token.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], uncertainty: f64, pad: u32) -> Result<Var> {
        let t = self.value(logits);
        let (r, v) = dims2(t.shape());
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&uncertainty) || v < 2 {
            return Err(Error::Config(format!(
                "label smoothing {uncertainty} with vocabulary {v}"
            )));
        }
        let off = uncertainty / (v - 1) as f64;
        let count = targets.iter().filter(|&&y| y != pad).count();
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; r * v];
        if count > 0 {
            for (i, &y) in targets.iter().enumerate() {
                if y == pad {
                    continue;
                }
                let y = y as usize;
                if y >= v {
                    return Err(Error::shape("cross_entropy", format!("target {y} >= {v}")));
                }
                let row = t.row(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
                let d = &mut dlogits[i * v..(i + 1) * v];
                for j in 0..v {
                    let q = if j == y { 1.0 - uncertainty } else { off };
                    let logp = row[j] - lse;
                    if q > 0.0 {
                        loss -= q * logp;
                    }
                    d[j] = (logp.exp() - q) / count as f64;
                }
            }
            loss /= count as f64;
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, dlogits },
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Reverse pass from a scalar. Every node reachable from `loss` gets a
    /// gradient; unreachable leaves read as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let n = self.nodes[v.0].value.numel();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| matmul_nt_acc(ga, g, vb, m, k, n));
                acc(*b, &mut |gb| matmul_tn_acc(gb, va, g, m, k, n));
            }
            Op::Binary { a, b, kind } => {
                let out_shape = node.value.shape();
                let (r, c) = dims2(out_shape);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let idx = |s: &[usize], i: usize, j: usize| {
                    if s == out_shape {
                        return i * c + j;
                    }
                    let (rr, cc) = dims2(s);
                    (if rr == 1 { 0 } else { i }) * cc + if cc == 1 { 0 } else { j }
                };
                let kind = *kind;
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            let o = g[i * c + j];
                            ga[idx(&sa, i, j)] += match kind {
                                BinKind::Add | BinKind::Sub => o,
                                BinKind::Mul => o * vb[idx(&sb, i, j)],
                            };
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            let o = g[i * c + j];
                            gb[idx(&sb, i, j)] += match kind {
                                BinKind::Add => o,
                                BinKind::Sub => -o,
                                BinKind::Mul => o * va[idx(&sa, i, j)],
                            };
                        }
                    }
                });
            }
            Op::Affine { x, mul } => acc(*x, &mut |gx| {
                for (d, &o) in gx.iter_mut().zip(g) {
                    *d += mul * o;
                }
            }),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, &s) in gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, alen, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let (r, c) = dims2(node.value.shape());
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((d, &o), &s) in gx.iter_mut().zip(g).zip(y) {
                        *d += o * s * (1.0 - s);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((d, &o), &v) in gx.iter_mut().zip(g).zip(vx) {
                        if v > 0.0 {
                            *d += o;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = dims2(node.value.shape());
                let gv = self.value(*gain).data();
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let (gr, hr) = (&g[row.clone()], &xhat[row]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            gx[i * c + j] += rstd[i] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for ((d, &o), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += o * m;
                }
            }),
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |gt| {
                    for (t, &id) in ids.iter().enumerate() {
                        for (dst, &s) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d]) {
                            *dst += s;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, dlogits } => acc(*logits, &mut |gl| {
                for (d, &s) in gl.iter_mut().zip(dlogits) {
                    *d += g[0] * s;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, zeros when unreachable.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }
}
