//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so the reverse pass is a single
//! backward sweep over the node list.

use crate::conv::{self, ConvDims, ConvGeom};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    Exp,
    Log,
    Abs,
    Softplus,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        cols: Option<Vec<T>>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    ChannelGate(Var, Var),
    MeanSpatial(Var),
    AvgPool(Var, usize),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    L2NormRows(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    MaskedLseRows(Var, Vec<bool>),
    SubRowBroadcast(Var, Var),
    MaskedRowMean(Var, Vec<bool>),
    SumAll(Var),
    MeanAll(Var),
    RepeatBatch(Var, usize),
    SumBatchGroups(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf; `None` when no path reaches the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Recording of a differentiable computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(TensorError::Shape(msg))
}

/// Split `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row/column strides of `op(X)` with logical dims `r x c`.
fn view(trans: bool, r: usize, c: usize) -> (isize, isize) {
    if trans {
        (1, r as isize)
    } else {
        (c as isize, 1)
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// New constant leaf holding the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, what)?;
        Ok(self.value(a).zip_map(self.value(b), f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a / s` for a single-element `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err(format!("div_scalar: divisor shape {:?}", self.shape(s)));
        }
        let d = self.scalar(s);
        let v = self.value(a).map(|x| x / d);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(v, Op::DivScalar(a, s), rg))
    }

    /// Sum of several same-shape nodes.
    pub fn sum_of(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| TensorError::Shape("sum_of: no inputs".into()))?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ct = T::of(c);
        let v = self.value(a).map(|x| x * ct);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ct = T::of(c);
        let v = self.value(a).map(|x| x + ct);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let v = match kind {
            Unary::Tanh => self.value(a).map(|x| x.tanh()),
            Unary::Sigmoid => self.value(a).map(sigmoid),
            Unary::LeakyRelu(s) => {
                let s = T::of(s);
                self.value(a).map(|x| if x > T::zero() { x } else { x * s })
            }
            Unary::Exp => self.value(a).map(|x| x.exp()),
            Unary::Log => self.value(a).map(|x| x.ln()),
            Unary::Abs => self.value(a).map(|x| x.abs()),
            Unary::Softplus => self.value(a).map(softplus),
        };
        let rg = self.rg(a);
        self.push(v, Op::Unary(a, kind), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        let v = self.value(a).map(|x| x.max(l).min(h));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    /// NHWC convolution; `w` is `[k*k*cin, cout]`, `b` is `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return shape_err(format!("conv2d: input must be NHWC, got {xs:?}"));
        }
        let (bn, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != geom.kernel * geom.kernel * cin {
            return shape_err(format!(
                "conv2d: weight {ws:?} incompatible with cin={cin}, kernel={}",
                geom.kernel
            ));
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv2d: bias {:?} vs cout={cout}", self.shape(b)));
            }
        }
        let (ho, wo) = geom.out_hw(h, wd)?;
        let dims = ConvDims { b: bn, h, w: wd, cin, ho, wo, cout, geom };
        let (out, cols) = conv::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let keep_cols = self.rg(w);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let v = Tensor::new(&[bn, ho, wo, cout], out)?;
        Ok(self.push(
            v,
            Op::Conv { x, w, b, dims, cols: if keep_cols { cols } else { None } },
            rg,
        ))
    }

    /// `op(a) · op(b)` for rank-2 operands, `op` transposing when flagged.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("matmul: rank-2 operands required, got {sa:?}, {sb:?}"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return shape_err(format!("matmul: inner dims {k} vs {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsa, csa) = view(ta, m, k);
        let (rsb, csb) = view(tb, k, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            rsa,
            csa,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb, m, k, n }, rg))
    }

    /// `x[b, h, w, c] * g[b, c]`.
    pub fn channel_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(g) != [xs[0], xs[3]] {
            return shape_err(format!(
                "channel_gate: {xs:?} vs gate {:?}",
                self.shape(g)
            ));
        }
        let (hw, c) = (xs[1] * xs[2], xs[3]);
        let gv = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for (i, px) in out.chunks_exact_mut(c).enumerate() {
            let gb = &gv[(i / hw) * c..(i / hw + 1) * c];
            for (o, &s) in px.iter_mut().zip(gb) {
                *o = *o * s;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        let v = Tensor::new(&xs, out)?;
        Ok(self.push(v, Op::ChannelGate(x, g), rg))
    }

    /// Global spatial mean: `[b, h, w, c] -> [b, c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("mean_spatial: NHWC required, got {xs:?}"));
        }
        let (b, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
        let mut out = vec![T::zero(); b * c];
        let xv = self.value(x).data();
        for bi in 0..b {
            for p in 0..hw {
                let px = &xv[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                for (o, &v) in out[bi * c..(bi + 1) * c].iter_mut().zip(px) {
                    *o = *o + v;
                }
            }
        }
        let inv = T::one() / T::of(hw as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let rg = self.rg(x);
        let v = Tensor::new(&[b, c], out)?;
        Ok(self.push(v, Op::MeanSpatial(x), rg))
    }

    /// Non-overlapping `s x s` average pooling.
    pub fn avg_pool(&mut self, x: Var, s: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || s == 0 || xs[1] % s != 0 || xs[2] % s != 0 {
            return shape_err(format!("avg_pool: {xs:?} not divisible by {s}"));
        }
        if s == 1 {
            let v = self.value(x).clone();
            let rg = self.rg(x);
            return Ok(self.push(v, Op::AvgPool(x, 1), rg));
        }
        let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / s, w / s);
        let mut out = vec![T::zero(); b * ho * wo * c];
        let xv = self.value(x).data();
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((bi * h + y) * w + xx) * c;
                    let dst = ((bi * ho + y / s) * wo + xx / s) * c;
                    for ci in 0..c {
                        out[dst + ci] = out[dst + ci] + xv[src + ci];
                    }
                }
            }
        }
        let inv = T::one() / T::of((s * s) as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let rg = self.rg(x);
        let v = Tensor::new(&[b, ho, wo, c], out)?;
        Ok(self.push(v, Op::AvgPool(x, s), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat: no inputs".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return shape_err(format!("concat: {s:?} incompatible with {base:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return shape_err(format!("slice: {start}+{len} on axis {axis} of {xs:?}"));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(x);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Rows of `x` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let d = self.value(x).last_dim();
        let rows = self.value(x).numel() / d.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err(format!("gather_rows: index {bad} out of {rows} rows"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        let v = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(v, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Unit-normalize along the last axis. A zero row maps to the first
    /// basis vector and passes no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v = *v / n);
            } else {
                row.iter_mut().for_each(|v| *v = T::zero());
                row[0] = T::one();
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let v = Tensor { shape, data: out }.checked();
        self.push(v, Op::L2NormRows(x), rg)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let v = Tensor { shape, data: out }.checked();
        self.push(v, Op::SoftmaxLast(x), rg)
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let v = Tensor { shape, data: out }.checked();
        self.push(v, Op::LogSoftmaxLast(x), rg)
    }

    fn check_mask(&self, x: Var, mask: &[bool], what: &str) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 2 || mask.len() != xs[0] * xs[1] {
            return shape_err(format!("{what}: x {xs:?} vs mask of {}", mask.len()));
        }
        Ok((xs[0], xs[1]))
    }

    /// Per-row log-sum-exp over masked entries; `-inf` for an empty row.
    pub fn masked_logsumexp_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.check_mask(x, mask, "masked_logsumexp_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![T::neg_infinity(); m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mr = &mask[i * n..(i + 1) * n];
            let mx = row
                .iter()
                .zip(mr)
                .filter(|(_, &k)| k)
                .fold(T::neg_infinity(), |a, (&b, _)| a.max(b));
            if mx == T::neg_infinity() {
                continue;
            }
            let s: T = row
                .iter()
                .zip(mr)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| (v - mx).exp())
                .sum();
            out[i] = mx + s.ln();
        }
        let rg = self.rg(x);
        let v = Tensor::new(&[m], out)?;
        Ok(self.push(v, Op::MaskedLseRows(x, mask.to_vec()), rg))
    }

    /// `x[i, j] - v[i]`.
    pub fn sub_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(v) != [xs[0]] {
            return shape_err(format!(
                "sub_row_broadcast: {xs:?} vs {:?}",
                self.shape(v)
            ));
        }
        let n = xs[1];
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            row.iter_mut().for_each(|e| *e = *e - vv[i]);
        }
        let rg = self.rg(x) || self.rg(v);
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(t, Op::SubRowBroadcast(x, v), rg))
    }

    /// Per-row mean over masked entries; 0 for an empty row.
    pub fn masked_row_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.check_mask(x, mask, "masked_row_mean")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            let mut s = T::zero();
            let mut c = 0usize;
            for j in 0..n {
                if mask[i * n + j] {
                    s = s + xv[i * n + j];
                    c += 1;
                }
            }
            if c > 0 {
                out[i] = s / T::of(c as f64);
            }
        }
        let rg = self.rg(x);
        let v = Tensor::new(&[m], out)?;
        Ok(self.push(v, Op::MaskedRowMean(x, mask.to_vec()), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::of(t.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Tile the whole tensor `n` times along axis 0.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || n == 0 {
            return shape_err(format!("repeat_batch: {xs:?} x {n}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = xs;
        shape[0] *= n;
        let rg = self.rg(x);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::RepeatBatch(x, n), rg))
    }

    /// Inverse of [`Graph::repeat_batch`]: sums `n` consecutive groups along axis 0.
    pub fn sum_batch_groups(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || n == 0 || xs[0] % n != 0 {
            return shape_err(format!("sum_batch_groups: {xs:?} into {n} groups"));
        }
        let src = self.value(x).data();
        let group = src.len() / n;
        let mut out = src[..group].to_vec();
        for gi in 1..n {
            for (o, &v) in out.iter_mut().zip(&src[gi * group..(gi + 1) * group]) {
                *o = *o + v;
            }
        }
        let mut shape = xs;
        shape[0] /= n;
        let rg = self.rg(x);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::SumBatchGroups(x, n), rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward: loss must be a scalar, got {:?}",
                self.shape(loss)
            ));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.backward_node(node, &g, &mut slots)?;
        }
        Ok(Grads { slots })
    }

    fn acc(&self, slots: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut slots[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor { shape: self.shape(v).to_vec(), data }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        slots: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(slots, *a, g.clone());
                self.acc(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(slots, *a, g.clone());
                if self.rg(*b) {
                    self.acc(slots, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(slots, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.acc(slots, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::DivScalar(a, s) => {
                let d = self.scalar(*s);
                if self.rg(*a) {
                    self.acc(slots, *a, g.map(|x| x / d));
                }
                if self.rg(*s) {
                    let dot: T = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gi, &ai)| gi * ai)
                        .sum();
                    self.acc(slots, *s, Tensor::scalar(-dot / (d * d)));
                }
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                self.acc(slots, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => self.acc(slots, *a, g.clone()),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let d: Vec<T> = match kind {
                    Unary::Tanh => zip3(g, y, |gi, yi| gi * (T::one() - yi * yi)),
                    Unary::Sigmoid => zip3(g, y, |gi, yi| gi * yi * (T::one() - yi)),
                    Unary::LeakyRelu(s) => {
                        let s = T::of(*s);
                        zip3(g, x, |gi, xi| if xi > T::zero() { gi } else { gi * s })
                    }
                    Unary::Exp => zip3(g, y, |gi, yi| gi * yi),
                    Unary::Log => zip3(g, x, |gi, xi| gi / xi),
                    Unary::Abs => zip3(g, x, |gi, xi| {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    }),
                    Unary::Softplus => zip3(g, x, |gi, xi| gi * sigmoid(xi)),
                };
                self.acc(slots, *a, self.like(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::of(*lo), T::of(*hi));
                let d = zip3(g, self.value(*a), |gi, xi| {
                    if xi < l || xi > h {
                        T::zero()
                    } else {
                        gi
                    }
                });
                self.acc(slots, *a, self.like(*a, d));
            }
            Op::Conv { x, w, b, dims, cols } => {
                if self.rg(*w) {
                    let a = cols.as_deref().unwrap_or(self.value(*x).data());
                    let gw = conv::conv_grad_weight(a, g.data(), dims);
                    self.acc(slots, *w, self.like(*w, gw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb = conv::conv_grad_bias(g.data(), dims);
                        self.acc(slots, *b, self.like(*b, gb));
                    }
                }
                if self.rg(*x) {
                    let gx = conv::conv_grad_input(self.value(*w).data(), g.data(), dims);
                    self.acc(slots, *x, self.like(*x, gx));
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let va = view(*ta, m, k);
                let vb = view(*tb, k, n);
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        self.value(*b).data(),
                        vb.1,
                        vb.0,
                        T::zero(),
                        &mut ga,
                        va.0,
                        va.1,
                    );
                    self.acc(slots, *a, self.like(*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        va.1,
                        va.0,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut gb,
                        vb.0,
                        vb.1,
                    );
                    self.acc(slots, *b, self.like(*b, gb));
                }
            }
            Op::ChannelGate(x, gate) => {
                let xs = self.shape(*x);
                let (hw, c) = (xs[1] * xs[2], xs[3]);
                let gv = self.value(*gate).data();
                if self.rg(*x) {
                    let mut gx = g.data().to_vec();
                    for (i, px) in gx.chunks_exact_mut(c).enumerate() {
                        let gb = &gv[(i / hw) * c..(i / hw + 1) * c];
                        for (o, &s) in px.iter_mut().zip(gb) {
                            *o = *o * s;
                        }
                    }
                    self.acc(slots, *x, self.like(*x, gx));
                }
                if self.rg(*gate) {
                    let mut gg = vec![T::zero(); gv.len()];
                    let xv = self.value(*x).data();
                    for (i, (gp, xp)) in g
                        .data()
                        .chunks_exact(c)
                        .zip(xv.chunks_exact(c))
                        .enumerate()
                    {
                        let dst = &mut gg[(i / hw) * c..(i / hw + 1) * c];
                        for ((o, &a), &b) in dst.iter_mut().zip(gp).zip(xp) {
                            *o = *o + a * b;
                        }
                    }
                    self.acc(slots, *gate, self.like(*gate, gg));
                }
            }
            Op::MeanSpatial(x) => {
                let xs = self.shape(*x);
                let (hw, c) = (xs[1] * xs[2], xs[3]);
                let inv = T::one() / T::of(hw as f64);
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (i, px) in gx.chunks_exact_mut(c).enumerate() {
                    let src = &g.data()[(i / hw) * c..(i / hw + 1) * c];
                    for (o, &s) in px.iter_mut().zip(src) {
                        *o = s * inv;
                    }
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::AvgPool(x, s) => {
                let s = *s;
                if s == 1 {
                    self.acc(slots, *x, g.clone());
                    return Ok(());
                }
                let xs = self.shape(*x);
                let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / s, w / s);
                let inv = T::one() / T::of((s * s) as f64);
                let mut gx = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for yy in 0..h {
                        for xx in 0..w {
                            let dst = ((bi * h + yy) * w + xx) * c;
                            let src = ((bi * ho + yy / s) * wo + xx / s) * c;
                            for ci in 0..c {
                                gx[dst + ci] = g.data()[src + ci] * inv;
                            }
                        }
                    }
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.acc(slots, p, self.like(p, gp));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_split(xs, *axis);
                let len = y.shape()[*axis];
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::Reshape(x) => self.acc(slots, *x, self.like(*x, g.data().to_vec())),
            Op::GatherRows(x, idx) => {
                let d = self.value(*x).last_dim();
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[r * d..(r + 1) * d])
                    {
                        *o = *o + v;
                    }
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::L2NormRows(x) => {
                let d = self.value(*x).last_dim();
                let xv = self.value(*x).data();
                let mut gx = vec![T::zero(); xv.len()];
                for ((gr, (yr, xr)), o) in g
                    .data()
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d).zip(xv.chunks_exact(d)))
                    .zip(gx.chunks_exact_mut(d))
                {
                    let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if n == T::zero() {
                        continue;
                    }
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((oi, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
                        *oi = (gi - yi * dot) / n;
                    }
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::SoftmaxLast(x) => {
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for ((gr, yr), o) in g
                    .data()
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((oi, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
                        *oi = yi * (gi - dot);
                    }
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::LogSoftmaxLast(x) => {
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for ((gr, yr), o) in g
                    .data()
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                {
                    let s: T = gr.iter().copied().sum();
                    for ((oi, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
                        *oi = gi - yi.exp() * s;
                    }
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::MaskedLseRows(x, mask) => {
                let xs = self.shape(*x);
                let n = xs[1];
                let xv = self.value(*x).data();
                let mut gx = vec![T::zero(); xv.len()];
                for (i, (&gi, &lse)) in g.data().iter().zip(y.data()).enumerate() {
                    if lse == T::neg_infinity() {
                        continue;
                    }
                    for j in 0..n {
                        if mask[i * n + j] {
                            gx[i * n + j] = gi * (xv[i * n + j] - lse).exp();
                        }
                    }
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::SubRowBroadcast(x, v) => {
                let n = self.shape(*x)[1];
                if self.rg(*x) {
                    self.acc(slots, *x, g.clone());
                }
                if self.rg(*v) {
                    let gv: Vec<T> = g
                        .data()
                        .chunks_exact(n)
                        .map(|r| -r.iter().copied().sum::<T>())
                        .collect();
                    self.acc(slots, *v, self.like(*v, gv));
                }
            }
            Op::MaskedRowMean(x, mask) => {
                let n = self.shape(*x)[1];
                let mut gx = vec![T::zero(); mask.len()];
                for (i, &gi) in g.data().iter().enumerate() {
                    let row = &mask[i * n..(i + 1) * n];
                    let c = row.iter().filter(|&&k| k).count();
                    if c == 0 {
                        continue;
                    }
                    let share = gi / T::of(c as f64);
                    for j in 0..n {
                        if row[j] {
                            gx[i * n + j] = share;
                        }
                    }
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::SumAll(x) => {
                let t = Tensor::full(self.shape(*x), g.data()[0]);
                self.acc(slots, *x, t);
            }
            Op::MeanAll(x) => {
                let numel = self.value(*x).numel().max(1);
                let t = Tensor::full(self.shape(*x), g.data()[0] / T::of(numel as f64));
                self.acc(slots, *x, t);
            }
            Op::RepeatBatch(x, n) => {
                let group = self.value(*x).numel();
                let mut gx = g.data()[..group].to_vec();
                for gi in 1..*n {
                    for (o, &v) in gx.iter_mut().zip(&g.data()[gi * group..(gi + 1) * group]) {
                        *o = *o + v;
                    }
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
            Op::SumBatchGroups(x, n) => {
                let mut gx = Vec::with_capacity(g.numel() * n);
                for _ in 0..*n {
                    gx.extend_from_slice(g.data());
                }
                self.acc(slots, *x, self.like(*x, gx));
            }
        }
        Ok(())
    }
}

fn zip3<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    g.data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect()
}

impl<T: Real> Tensor<T> {
    fn checked(self) -> Self {
        debug_assert_eq!(self.shape().iter().product::<usize>(), self.numel());
        self
    }
}
