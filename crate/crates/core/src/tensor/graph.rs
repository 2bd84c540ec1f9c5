use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_acc, gemm_acc_at, gemm_acc_bt, permute};
use super::params::Bound;
use super::{broadcast_offsets, broadcast_shape, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward-pass mode. Training carries the RNG that drives dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    MaskedSoftmax,
    LayerNorm,
    SwapAxes,
    Reshape,
    BroadcastTo,
    Concat,
    Slice,
    Dropout,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::MaskedSoftmax,
        OpKind::LayerNorm,
        OpKind::SwapAxes,
        OpKind::Reshape,
        OpKind::BroadcastTo,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Dropout,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SwapAxes => "swap_axes",
            OpKind::Reshape => "reshape",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        // (batch index into a, batch index into b) for every output batch.
        pairs: Vec<(usize, usize)>,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: OpKind,
        a: Var,
        b: Var,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    MaskedSoftmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Permute {
        kind: OpKind,
        x: Var,
        shape: Vec<usize>,
        perm: Vec<usize>,
    },
    Reshape(Var),
    BroadcastTo {
        x: Var,
        map: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_width: usize,
        start: usize,
        width: usize,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Binary { kind, .. } => *kind,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::MaskedSoftmax { .. } => OpKind::MaskedSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Permute { kind, .. } => *kind,
            Op::Reshape(_) => OpKind::Reshape,
            Op::BroadcastTo { .. } => OpKind::BroadcastTo,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` is unreachable from the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward pass deliberately perturbs the vector-Jacobian
    /// product of one op kind. Used to prove the gradient checker can fail.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers every tensor of `store` as a trainable leaf, in store order.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        Bound(store.tensors().map(|t| self.param(t.clone())).collect())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
        let amap = broadcast_offsets(ba, &batch);
        let bmap = broadcast_offsets(bb, &batch);
        let pairs: Vec<(usize, usize)> = amap.into_iter().zip(bmap).collect();

        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; pairs.len() * m * n];
        for (o, &(ia, ib)) in pairs.iter().enumerate() {
            gemm_acc(
                &av[ia * m * k..(ia + 1) * m * k],
                &bv[ib * k * n..(ib + 1) * k * n],
                &mut out[o * m * n..(o + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, pairs, m, k, n }, rg))
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: kind.name(),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let a_map = (sa != shape).then(|| broadcast_offsets(&sa, &shape));
        let b_map = (sb != shape).then(|| broadcast_offsets(&sb, &shape));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = shape.iter().product();
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let x = av[a_map.as_ref().map_or(i, |m| m[i])];
                let y = bv[b_map.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            },
            rg,
        ))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.map_value(x, |v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map_value(x, |v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map_value(x, sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    fn map_value(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f(v)).collect(),
        }
    }

    /// Softmax over the last axis of `logits + mask`.
    ///
    /// `mask` must broadcast to the logits and hold only `0` or `-inf`. Rows in
    /// which every entry is masked produce all zeros.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&Tensor>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::Invalid("masked_softmax needs at least one axis".into()))?;
        let x = self.value(logits).data();
        let mut z = x.to_vec();
        if let Some(mask) = mask {
            let full = broadcast_shape(mask.shape(), &shape)
                .filter(|s| *s == shape)
                .ok_or_else(|| TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: shape.clone(),
                    rhs: mask.shape().to_vec(),
                })?;
            let map = broadcast_offsets(mask.shape(), &full);
            for (zi, &mi) in z.iter_mut().zip(&map) {
                *zi += mask.data()[mi];
            }
        }
        let mut out = vec![0.0; z.len()];
        if cols > 0 {
            for (zrow, orow) in z.chunks(cols).zip(out.chunks_mut(cols)) {
                softmax_row(zrow, orow);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedSoftmax { x: logits, cols }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len().checked_div(d).unwrap_or(0);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn swap_axes(&mut self, x: Var, i: usize, j: usize) -> Result<Var> {
        let value = self.value(x).swap_axes(i, j)?;
        let mut perm: Vec<usize> = (0..value.rank()).collect();
        perm.swap(i, j);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Permute {
                kind: OpKind::SwapAxes,
                x,
                shape,
                perm,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let value = self.value(x).broadcast_to(shape)?;
        let map = broadcast_offsets(&src, shape);
        let rg = self.rg(x);
        Ok(self.push(value, Op::BroadcastTo { x, map }, rg))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Takes `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "slice {start}..{} exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_width = shape[axis] * inner;
        let width = len * inner;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * src_width + start * inner;
            out.extend_from_slice(&xv[base..base + width]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::Slice {
                x,
                outer,
                src_width,
                start: start * inner,
                width,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales
    /// survivors by `1/(1-rate)` in training; the identity in evaluation.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: &mut Mode<'_>) -> Var {
        let rng = match mode {
            Mode::Train(rng) if rate > 0.0 => rng,
            _ => return x,
        };
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.dropout_with_mask(x, scale)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(&mut self, x: Var, scale: Vec<f64>) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), scale.len(), "dropout mask length");
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().zip(&scale).map(|(v, s)| v * s).collect(),
        };
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, scale }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_with(loss, &Tensor::full(lv.shape().to_vec(), 1.0))
    }

    /// Reverse sweep seeded with `cotangent` at `output`: the vector-Jacobian
    /// product of every node with `cotangent`.
    pub fn backward_with(&self, output: Var, cotangent: &Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.shape(output) {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: cotangent.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(cotangent.data().to_vec());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.01);
            }
            self.propagate(node, &g, &mut grads);
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v /= 1.01);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, pairs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let da = grad_slot(grads, *a, self.value(*a).len());
                    for (o, &(ia, ib)) in pairs.iter().enumerate() {
                        gemm_acc_bt(
                            &g[o * m * n..(o + 1) * m * n],
                            &bv[ib * k * n..(ib + 1) * k * n],
                            &mut da[ia * m * k..(ia + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let db = grad_slot(grads, *b, self.value(*b).len());
                    for (o, &(ia, ib)) in pairs.iter().enumerate() {
                        gemm_acc_at(
                            &av[ia * m * k..(ia + 1) * m * k],
                            &g[o * m * n..(o + 1) * m * n],
                            &mut db[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            } => {
                let idx = |map: &Option<Vec<usize>>, i: usize| map.as_ref().map_or(i, |m| m[i]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let da = grad_slot(grads, *a, av.len());
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            OpKind::Mul => gi * bv[idx(b_map, i)],
                            _ => *gi,
                        };
                        da[idx(a_map, i)] += d;
                    }
                }
                if self.rg(*b) {
                    let db = grad_slot(grads, *b, bv.len());
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            OpKind::Mul => gi * av[idx(a_map, i)],
                            OpKind::Sub => -gi,
                            _ => *gi,
                        };
                        db[idx(b_map, i)] += d;
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = grad_slot(grads, *x, g.len());
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = grad_slot(grads, *x, g.len());
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = grad_slot(grads, *x, g.len());
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::MaskedSoftmax { x, cols } => {
                let cols = *cols;
                if cols == 0 {
                    return;
                }
                let y = node.value.data();
                let dx = grad_slot(grads, *x, g.len());
                for ((drow, grow), yrow) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if d == 0 {
                    return;
                }
                if self.rg(*gain) {
                    let dg = grad_slot(grads, *gain, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let db = grad_slot(grads, *bias, d);
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let dx = grad_slot(grads, *x, g.len());
                    let nd = d as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            dx[r * d + j] += is / nd * (nd * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Permute { x, shape, perm, .. } => {
                // The inverse permutation maps the output layout back to the input layout.
                let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let back = permute(g, &out_shape, &inv);
                let dx = grad_slot(grads, *x, back.len());
                for (d, b) in dx.iter_mut().zip(back) {
                    *d += b;
                }
            }
            Op::Reshape(x) => {
                let dx = grad_slot(grads, *x, g.len());
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::BroadcastTo { x, map } => {
                let n = self.value(*x).len();
                let dx = grad_slot(grads, *x, n);
                for (gi, &src) in g.iter().zip(map) {
                    dx[src] += gi;
                }
            }
            Op::Concat { parts, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut col = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.rg(p) {
                        let dp = grad_slot(grads, p, outer * w);
                        for o in 0..*outer {
                            let src = &g[o * total + col..o * total + col + w];
                            for (d, s) in dp[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Slice {
                x,
                outer,
                src_width,
                start,
                width,
            } => {
                let dx = grad_slot(grads, *x, outer * src_width);
                for o in 0..*outer {
                    let dst = &mut dx[o * src_width + start..o * src_width + start + width];
                    for (d, s) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *d += s;
                    }
                }
            }
            Op::Dropout { x, scale } => {
                let dx = grad_slot(grads, *x, g.len());
                for ((d, gi), s) in dx.iter_mut().zip(g).zip(scale) {
                    *d += gi * s;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let dx = grad_slot(grads, *x, n);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z
        .iter()
        .copied()
        .filter(|v| *v != f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
