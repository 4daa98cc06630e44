use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, NormStats};
use super::{broadcast_shape, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Affine { x: Var, scale: T },
    Silu(Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: NormStats<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    Upsample2x(Var),
    AvgPool2x(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording tape. Nodes are appended in evaluation order, so the node list
/// is already a topological order.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs_grad = inputs.iter().any(|&v| self.needs_grad(v));
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    pub fn binary(&self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: op.name(),
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let data = kernels::broadcast_binary(ta.data(), ta.shape(), tb.data(), tb.shape(), &out_shape, |x, y| {
            op.apply(x, y)
        });
        self.push(op.name(), Tensor::new(&out_shape, data)?, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// `op(a, s)` against a scalar constant.
    pub fn binary_scalar(&self, op: BinaryOp, a: Var, s: T) -> Result<Var> {
        match op {
            BinaryOp::Add | BinaryOp::Sub => {
                let s = self.constant(Tensor::scalar(s))?;
                self.binary(op, a, s)
            }
            BinaryOp::Mul => self.scale(a, s),
            BinaryOp::Div => {
                if s == T::zero() {
                    return Err(Error::NonFinite { op: "div".into() });
                }
                self.scale(a, T::one() / s)
            }
        }
    }

    pub fn scale(&self, x: Var, scale: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * scale);
        self.push("scale", out, Op::Affine { x, scale }, &[x])
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push("silu", out, Op::Silu(x), &[x])
    }

    /// `[.., K] × [K, N]`; leading dims of the left operand are flattened.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = ta.numel() / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(&shape, out)?, Op::Matmul(a, b), &[a, b])
    }

    /// Batched `[B, M, K] × [B, K, N]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch { op: "bmm", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &tb.data()[i * k * n..(i + 1) * k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        self.push("bmm", Tensor::new(&[bs, m, n], out)?, Op::Bmm(a, b), &[a, b])
    }

    fn conv_geom(&self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let mismatch = || Error::ShapeMismatch { op: "conv2d", lhs: si.clone(), rhs: sw.clone() };
        if si.len() != 4 || sw.len() != 4 || sw[1] != si[1] || sw[2] != sw[3] {
            return Err(mismatch());
        }
        if sw[2] == 0 || stride == 0 {
            return Err(Error::invalid("conv2d kernel size and stride must be positive"));
        }
        let k = sw[2];
        if si[2] + 2 * pad < k || si[3] + 2 * pad < k {
            return Err(mismatch());
        }
        Ok(ConvGeom {
            n: si[0],
            cin: si[1],
            h: si[2],
            w: si[3],
            cout: sw[0],
            k,
            stride,
            pad,
            hout: (si[2] + 2 * pad - k) / stride + 1,
            wout: (si[3] + 2 * pad - k) / stride + 1,
        })
    }

    /// 2-D convolution over `[N, Cin, H, W]` with weight `[Cout, Cin, k, k]`.
    ///
    /// Applied to a video laid out as `[F, C, H, W]` this is the frame-preserving
    /// `1×k×k` space-only 3-D convolution.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = self.conv_geom(input, weight, stride, pad)?;
        let mut inputs = vec![input, weight];
        if let Some(b) = bias {
            if self.shape(b) != [g.cout] {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: self.shape(b), rhs: vec![g.cout] });
            }
            inputs.push(b);
        }
        let (ti, tw) = (self.value(input), self.value(weight));
        let tb = bias.map(|b| self.value(b));
        let out = kernels::conv2d_forward(&g, ti.data(), tw.data(), tb.as_ref().map(|t| t.data()));
        let value = Tensor::new(&[g.n, g.cout, g.hout, g.wout], out)?;
        self.push("conv2d", value, Op::Conv2d { input, weight, bias, stride, pad }, &inputs)
    }

    /// Group normalization of `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() < 2 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(Error::invalid(format!("group_norm: {groups} groups for shape {s:?}")));
        }
        let c = s[1];
        self.check_affine("group_norm", gamma, beta, c)?;
        let inner = tx.numel() / (s[0] * c);
        let seg = inner * (c / groups);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let (out, stats) =
            kernels::segment_norm_forward(tx.data(), seg, |flat| (flat / inner) % c, tg.data(), tb.data());
        let value = Tensor::new(s, out)?;
        self.push("group_norm", value, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        self.check_affine("layer_norm", gamma, beta, d)?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let (out, stats) = kernels::segment_norm_forward(tx.data(), d, |flat| flat % d, tg.data(), tb.data());
        let value = Tensor::new(tx.shape(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, c: usize) -> Result<()> {
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch { op, lhs: self.shape(v), rhs: vec![c] });
            }
        }
        Ok(())
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let value = Tensor::new(tx.shape(), kernels::softmax_rows(tx.data(), d))?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.value(x)).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let (data, shape) = kernels::permute(tx.data(), tx.shape(), perm);
        self.push("permute", Tensor::new(&shape, data)?, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::ShapeMismatch { op: "concat", lhs: base, rhs: s });
            }
            total += s[axis];
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", Tensor::new(&shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// `out[i] = table[indices[i]]` along axis 0 (embedding lookup).
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let rows = tt.shape()[0];
        let row_len = tt.numel() / rows;
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(format!("gather index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&tt.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = tt.shape().to_vec();
        shape[0] = indices.len();
        let op = Op::GatherRows { table, indices: indices.to_vec() };
        self.push("gather_rows", Tensor::new(&shape, data)?, op, &[table])
    }

    fn planes_hw(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 3 {
            return Err(Error::invalid(format!("{op} needs rank >= 3, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((s.iter().product::<usize>() / (h * w), h, w))
    }

    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.planes_hw(x, "upsample2x")?;
        let mut shape = self.shape(x);
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let data = kernels::upsample2x(self.value(x).data(), planes, h, w);
        self.push("upsample2x", Tensor::new(&shape, data)?, Op::Upsample2x(x), &[x])
    }

    pub fn avg_pool2x(&self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.planes_hw(x, "avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!("avg_pool2x needs even spatial dims, got {h}x{w}")));
        }
        let mut shape = self.shape(x);
        let r = shape.len();
        shape[r - 2] /= 2;
        shape[r - 1] /= 2;
        let data = kernels::avg_pool2x(self.value(x).data(), planes, h, w);
        self.push("avg_pool2x", Tensor::new(&shape, data)?, Op::AvgPool2x(x), &[x])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / T::from_f64(t.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(nodes[loss.0].value.shape(), vec![T::one()])?);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut emit = |v: Var, t: Tensor<T>| -> Result<()> {
                if !nodes[v.0].needs_grad {
                    return Ok(());
                }
                t.ensure_finite("backward")?;
                accumulate(&mut grads[v.0], t)
            };
            let val = |v: Var| &nodes[v.0].value;
            let want = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Binary(op, a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let out_shape = node.value.shape();
                    let gd = g.data();
                    let (ga, gb): (Option<Vec<T>>, Option<Vec<T>>) = match op {
                        BinaryOp::Add => (want(*a).then(|| gd.to_vec()), want(*b).then(|| gd.to_vec())),
                        BinaryOp::Sub => {
                            (want(*a).then(|| gd.to_vec()), want(*b).then(|| gd.iter().map(|&v| -v).collect()))
                        }
                        BinaryOp::Mul => (
                            want(*a).then(|| {
                                let bb = expand(tb, out_shape);
                                gd.iter().zip(&bb).map(|(&g, &y)| g * y).collect()
                            }),
                            want(*b).then(|| {
                                let aa = expand(ta, out_shape);
                                gd.iter().zip(&aa).map(|(&g, &x)| g * x).collect()
                            }),
                        ),
                        BinaryOp::Div => {
                            let bb = expand(tb, out_shape);
                            (
                                want(*a).then(|| gd.iter().zip(&bb).map(|(&g, &y)| g / y).collect()),
                                want(*b).then(|| {
                                    let aa = expand(ta, out_shape);
                                    gd.iter().zip(&aa).zip(&bb).map(|((&g, &x), &y)| -g * x / (y * y)).collect()
                                }),
                            )
                        }
                    };
                    if let Some(ga) = ga {
                        let r = kernels::reduce_to_shape(&ga, out_shape, ta.shape());
                        emit(*a, Tensor::new(ta.shape(), r)?)?;
                    }
                    if let Some(gb) = gb {
                        let r = kernels::reduce_to_shape(&gb, out_shape, tb.shape());
                        emit(*b, Tensor::new(tb.shape(), r)?)?;
                    }
                }
                Op::Affine { x, scale } => emit(*x, g.map(|v| v * *scale))?,
                Op::Silu(x) => {
                    let gx = val(*x).zip_map(&g, |v, gv| {
                        let s = T::one() / (T::one() + (-v).exp());
                        gv * s * (T::one() + v * (T::one() - s))
                    })?;
                    emit(*x, gx)?;
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (k, n) = (tb.shape()[0], tb.shape()[1]);
                    let m = ta.numel() / k;
                    if want(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        T::gemm(m, n, k, g.data(), n as isize, 1, tb.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                        emit(*a, Tensor::new(ta.shape(), ga)?)?;
                    }
                    if want(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        T::gemm(k, m, n, ta.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                        emit(*b, Tensor::new(tb.shape(), gb)?)?;
                    }
                }
                Op::Bmm(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                    if want(*a) {
                        let mut ga = vec![T::zero(); bs * m * k];
                        for i in 0..bs {
                            T::gemm(
                                m,
                                n,
                                k,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                n as isize,
                                1,
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                1,
                                n as isize,
                                T::zero(),
                                &mut ga[i * m * k..(i + 1) * m * k],
                                k as isize,
                                1,
                            );
                        }
                        emit(*a, Tensor::new(ta.shape(), ga)?)?;
                    }
                    if want(*b) {
                        let mut gb = vec![T::zero(); bs * k * n];
                        for i in 0..bs {
                            T::gemm(
                                k,
                                m,
                                n,
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                1,
                                k as isize,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                n as isize,
                                1,
                                T::zero(),
                                &mut gb[i * k * n..(i + 1) * k * n],
                                n as isize,
                                1,
                            );
                        }
                        emit(*b, Tensor::new(tb.shape(), gb)?)?;
                    }
                }
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    let (ti, tw) = (val(*input), val(*weight));
                    let (si, sw) = (ti.shape(), tw.shape());
                    let k = sw[2];
                    let geom = ConvGeom {
                        n: si[0],
                        cin: si[1],
                        h: si[2],
                        w: si[3],
                        cout: sw[0],
                        k,
                        stride: *stride,
                        pad: *pad,
                        hout: node.value.shape()[2],
                        wout: node.value.shape()[3],
                    };
                    let want_b = bias.is_some_and(want);
                    let (gi, gw, gb) =
                        kernels::conv2d_backward(&geom, ti.data(), tw.data(), g.data(), want(*input), want(*weight), want_b);
                    if let Some(gi) = gi {
                        emit(*input, Tensor::new(si, gi)?)?;
                    }
                    if let Some(gw) = gw {
                        emit(*weight, Tensor::new(sw, gw)?)?;
                    }
                    if let (Some(gb), Some(b)) = (gb, bias) {
                        emit(*b, Tensor::new(&[geom.cout], gb)?)?;
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let tx = val(*x);
                    let s = tx.shape();
                    let c = s[1];
                    let inner = tx.numel() / (s[0] * c);
                    let seg = inner * (c / groups);
                    let (gx, gg, gbeta) = kernels::segment_norm_backward(
                        tx.data(),
                        seg,
                        |flat| (flat / inner) % c,
                        val(*gamma).data(),
                        stats,
                        g.data(),
                        c,
                    );
                    emit(*x, Tensor::new(s, gx)?)?;
                    emit(*gamma, Tensor::new(&[c], gg)?)?;
                    emit(*beta, Tensor::new(&[c], gbeta)?)?;
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let tx = val(*x);
                    let d = *tx.shape().last().unwrap();
                    let (gx, gg, gbeta) = kernels::segment_norm_backward(
                        tx.data(),
                        d,
                        |flat| flat % d,
                        val(*gamma).data(),
                        stats,
                        g.data(),
                        d,
                    );
                    emit(*x, Tensor::new(tx.shape(), gx)?)?;
                    emit(*gamma, Tensor::new(&[d], gg)?)?;
                    emit(*beta, Tensor::new(&[d], gbeta)?)?;
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let gx = kernels::softmax_rows_backward(y.data(), g.data(), d);
                    emit(*x, Tensor::new(y.shape(), gx)?)?;
                }
                Op::Reshape(x) => emit(*x, g.reshape(val(*x).shape())?)?,
                Op::Permute(x, perm) => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (data, shape) = kernels::permute(g.data(), g.shape(), &inverse);
                    emit(*x, Tensor::new(&shape, data)?)?;
                }
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let ps = val(p).shape().to_vec();
                        let chunk = ps[*axis] * inner;
                        if want(p) {
                            let mut data = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let start = o * total + offset;
                                data.extend_from_slice(&g.data()[start..start + chunk]);
                            }
                            emit(p, Tensor::new(&ps, data)?)?;
                        }
                        offset += chunk;
                    }
                }
                Op::GatherRows { table, indices } => {
                    let tt = val(*table);
                    let row_len = tt.numel() / tt.shape()[0];
                    let mut acc = vec![T::zero(); tt.numel()];
                    for (i, &r) in indices.iter().enumerate() {
                        for j in 0..row_len {
                            acc[r * row_len + j] = acc[r * row_len + j] + g.data()[i * row_len + j];
                        }
                    }
                    emit(*table, Tensor::new(tt.shape(), acc)?)?;
                }
                Op::Upsample2x(x) => {
                    let s = val(*x).shape();
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let planes = val(*x).numel() / (h * w);
                    emit(*x, Tensor::new(s, kernels::upsample2x_backward(g.data(), planes, h, w))?)?;
                }
                Op::AvgPool2x(x) => {
                    let s = val(*x).shape();
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let planes = val(*x).numel() / (h * w);
                    emit(*x, Tensor::new(s, kernels::avg_pool2x_backward(g.data(), planes, h, w))?)?;
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    emit(*x, Tensor::full(val(*x).shape(), gv))?;
                }
                Op::Mean(x) => {
                    let t = val(*x);
                    let gv = g.data()[0] / T::from_f64(t.numel() as f64);
                    emit(*x, Tensor::full(t.shape(), gv))?;
                }
            }
        }

        // Every grad-requiring leaf gets a tensor, zero if it did not reach the loss.
        for (id, node) in nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf);
            if !is_leaf || !node.needs_grad {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => {
            existing.expect_same_shape(&t, "gradient accumulation")?;
            for (a, &b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(t),
    }
    Ok(())
}

/// Materialize `t` at the broadcast shape `out`.
fn expand<T: Element>(t: &Tensor<T>, out: &[usize]) -> Vec<T> {
    if t.shape() == out {
        return t.data().to_vec();
    }
    let strides = super::broadcast_strides(t.shape(), out);
    let numel: usize = out.iter().product();
    let mut v = vec![T::zero(); numel];
    kernels::for_each_offset(out, [&strides], |lin, [o]| v[lin] = t.data()[o]);
    v
}
