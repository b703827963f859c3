use super::tensor::{gemm, Element, Tensor};
use super::AutodiffError;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `outer × len × inner` decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, E),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, AxisSplit),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(Var),
    Mean(Var),
    ReduceAxis {
        x: Var,
        split: AxisSplit,
        mean: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Slice {
        x: Var,
        split: AxisSplit,
        start: usize,
        len: usize,
    },
    IndexSelect {
        x: Var,
        split: AxisSplit,
        indices: Vec<usize>,
    },
    Repeat {
        x: Var,
        times: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Define-by-run gradient tape.
///
/// Every operation appends a node after its inputs, so node order is a
/// topological order and the reverse pass is a single backwards sweep.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn permute_data<E: Element>(data: &[E], shape: &[usize], axes: &[usize]) -> (Vec<E>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, op: Op<E>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced inconsistent tensor");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Vec<E> {
        self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let data = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where the shape of `b` is a trailing suffix of the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let width = self.value(b).numel();
        let bd = self.data(b);
        let data = self
            .data(a)
            .chunks(width)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let s = E::from_f64(factor);
        let data = self.data(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, s), &[a])
    }

    fn unary(&mut self, a: Var, op: Op<E>, f: impl Fn(E) -> E) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), data, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(E::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (E::from_f64(GELU_C), E::from_f64(GELU_A), E::from_f64(0.5));
        self.unary(a, Op::Gelu(a), |x| {
            half * x * (E::one() + (c * (x + k * x * x * x)).tanh())
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| E::one() / (E::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    /// Softmax along `axis`, computed with max subtraction. NaN inputs propagate.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &shape, &[axis]));
        }
        let split = AxisSplit::new(&shape, axis);
        let x = self.data(a);
        let mut out = vec![E::zero(); x.len()];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let at = |l: usize| o * split.len * split.inner + l * split.inner + i;
                let max = (0..split.len)
                    .map(|l| x[at(l)])
                    .fold(E::neg_infinity(), |m, v| if v > m || v.is_nan() { v } else { m });
                let mut total = E::zero();
                for l in 0..split.len {
                    let e = (x[at(l)] - max).exp();
                    out[at(l)] = e;
                    total = total + e;
                }
                for l in 0..split.len {
                    out[at(l)] = out[at(l)] / total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax(a, split), &[a]))
    }

    /// Layer normalization over the last axis followed by `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = E::from_f64(eps);
        let dn = E::from_f64(d as f64);
        let (xs, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let r = E::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product `[B×m×k]·[B×k×n]`, or `[B×m×k]·[B×n×k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", sa, sb));
        }
        let mut out = vec![E::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let op = Op::BatchMatMul { a, b, trans_b, batch, m, k, n };
        Ok(self.push(vec![batch, m, n], out, op, &[a, b]))
    }

    /// `x · w (+ b)` over the last axis of `x`; `w` is `[in×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = *shape.last().ok_or_else(|| shape_err("linear", &shape, &sw))?;
        if sw.len() != 2 || sw[0] != din {
            return Err(shape_err("linear", &shape, &sw));
        }
        let rows = self.value(x).numel() / din;
        let flat = self.reshape(x, &[rows, din])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_broadcast(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().copied().sum();
        self.push(Vec::new(), vec![total], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = E::from_f64(self.value(a).numel() as f64);
        let total: E = self.data(a).iter().copied().sum();
        self.push(Vec::new(), vec![total / n], Op::Mean(a), &[a])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("reduce_axis", &shape, &[axis]));
        }
        let split = AxisSplit::new(&shape, axis);
        let x = self.data(a);
        let mut out = vec![E::zero(); split.outer * split.inner];
        for o in 0..split.outer {
            for l in 0..split.len {
                let src = &x[(o * split.len + l) * split.inner..][..split.inner];
                for (dst, &v) in out[o * split.inner..][..split.inner].iter_mut().zip(src) {
                    *dst = *dst + v;
                }
            }
        }
        if mean {
            let n = E::from_f64(split.len as f64);
            out.iter_mut().for_each(|v| *v = *v / n);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, out, Op::ReduceAxis { x: a, split, mean }, &[a]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.reduce_axis(a, axis, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        if shape.iter().product::<usize>() != self.value(a).numel() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(shape_err("permute", &shape, axes));
        }
        let (data, out_shape) = permute_data(self.data(a), &shape, axes);
        Ok(self.push(out_shape, data, Op::Permute { x: a, axes: axes.to_vec() }, &[a]))
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var, AutodiffError> {
        let mut axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if d0 >= axes.len() || d1 >= axes.len() {
            return Err(shape_err("transpose", self.shape(a), &[d0, d1]));
        }
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Invalid { op: "concat", msg: "no inputs".into() })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&self.data(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat { parts: parts.to_vec(), outer, inner, lens };
        Ok(self.push(shape, out, op, parts))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("slice", &shape, &[axis, start, len]));
        }
        let split = AxisSplit::new(&shape, axis);
        let x = self.data(a);
        let mut out = Vec::with_capacity(split.outer * len * split.inner);
        for o in 0..split.outer {
            let base = (o * split.len + start) * split.inner;
            out.extend_from_slice(&x[base..base + len * split.inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, Op::Slice { x: a, split, start, len }, &[a]))
    }

    /// Gathers entries of `axis` in the order given by `indices`.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.is_empty() {
            return Err(shape_err("index_select", &shape, &[axis]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(AutodiffError::Index { op: "index_select", index: bad, size: shape[axis] });
        }
        let split = AxisSplit::new(&shape, axis);
        let x = self.data(a);
        let mut out = Vec::with_capacity(split.outer * indices.len() * split.inner);
        for o in 0..split.outer {
            for &i in indices {
                let base = (o * split.len + i) * split.inner;
                out.extend_from_slice(&x[base..base + split.inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let op = Op::IndexSelect { x: a, split, indices: indices.to_vec() };
        Ok(self.push(out_shape, out, op, &[a]))
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var, AutodiffError> {
        if times == 0 {
            return Err(AutodiffError::Invalid { op: "repeat", msg: "zero copies".into() });
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(a));
        let x = self.data(a);
        let mut out = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            out.extend_from_slice(x);
        }
        Ok(self.push(shape, out, Op::Repeat { x: a, times }, &[a]))
    }

    /// Mean softmax cross-entropy of `[b×c]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err("cross_entropy", &shape, &[labels.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::Index { op: "cross_entropy", index: bad, size: c });
        }
        let x = self.data(logits);
        let mut probs = Vec::with_capacity(x.len());
        let mut total = E::zero();
        for (row, &label) in x.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let sum: E = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total = total + (log_z - row[label]);
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let loss = total / E::from_f64(labels.len() as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Vec::new(), vec![loss], op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Consumes the tape. Every node that requires a gradient receives one,
    /// zero-filled when it does not influence the loss.
    pub fn backward(self, loss: Var) -> Result<Gradients<E>, AutodiffError> {
        let root = self.nodes.get(loss.0).ok_or(AutodiffError::Detached)?;
        if !root.requires_grad {
            return Err(AutodiffError::Detached);
        }
        if root.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = self
            .nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let shape = node.value.shape().to_vec();
                    match g {
                        Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                        None => Tensor::zeros(&shape),
                    }
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Accumulation buffer for `v`, or None when `v` needs no gradient.
    fn grad_slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<E>>]) -> Option<&'g mut Vec<E>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![E::zero(); len]))
    }

    fn propagate(&self, idx: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = self.grad_slot($v, grads) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d));
                acc!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d));
            }
            Op::Sub(a, b) => {
                acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d));
                acc!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x = *x - d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |ga| {
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *x = *x + d * y;
                    }
                });
                acc!(*b, |gb| {
                    for ((x, &d), &y) in gb.iter_mut().zip(g).zip(ad) {
                        *x = *x + d * y;
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d));
                acc!(*b, |gb| {
                    let width = gb.len();
                    for row in g.chunks(width) {
                        gb.iter_mut().zip(row).for_each(|(x, &d)| *x = *x + d);
                    }
                });
            }
            Op::Scale(a, s) => {
                acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d * *s));
            }
            Op::Relu(a) => {
                let xd = self.data(*a);
                acc!(*a, |ga| {
                    for ((x, &d), &v) in ga.iter_mut().zip(g).zip(xd) {
                        if v > E::zero() {
                            *x = *x + d;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xd = self.data(*a);
                let (c, k, half) = (E::from_f64(GELU_C), E::from_f64(GELU_A), E::from_f64(0.5));
                let three = E::from_f64(3.0);
                acc!(*a, |ga| {
                    for ((x, &d), &v) in ga.iter_mut().zip(g).zip(xd) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (E::one() - t * t) * c * (E::one() + three * k * v * v);
                        *x = *x + d * (half * (E::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc!(*a, |ga| {
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x = *x + d * y * (E::one() - y);
                    }
                });
            }
            Op::Tanh(a) => {
                acc!(*a, |ga| {
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x = *x + d * (E::one() - y * y);
                    }
                });
            }
            Op::Softmax(a, split) => {
                acc!(*a, |ga| {
                    for o in 0..split.outer {
                        for i in 0..split.inner {
                            let at = |l: usize| o * split.len * split.inner + l * split.inner + i;
                            let dot: E = (0..split.len).map(|l| g[at(l)] * out[at(l)]).sum();
                            for l in 0..split.len {
                                ga[at(l)] = ga[at(l)] + out[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gam = self.data(*gamma);
                acc!(*gamma, |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                });
                acc!(*beta, |gb| {
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(x, &v)| *x = *x + v);
                    }
                });
                acc!(*x, |gx| {
                    let dn = E::from_f64(d as f64);
                    for (r, ((gxrow, grow), hrow)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dh = E::zero();
                        let mut sum_dh_h = E::zero();
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hrow[j];
                        }
                        let scale = rstd[r] / dn;
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            gxrow[j] = gxrow[j] + scale * (dn * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |ga| gemm(*m, *n, *k, g, false, bd, true, ga, true));
                acc!(*b, |gb| gemm(*k, *m, *n, ad, true, g, false, gb, true));
            }
            Op::BatchMatMul { a, b, trans_b, batch, m, k, n } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (m, k, n) = (*m, *k, *n);
                acc!(*a, |ga| {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        gemm(m, n, k, gi, false, bi, !*trans_b, &mut ga[i * m * k..(i + 1) * m * k], true);
                    }
                });
                acc!(*b, |gb| {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, dst, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, true);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc!(*a, |ga| ga.iter_mut().for_each(|x| *x = *x + g[0]));
            }
            Op::Mean(a) => {
                acc!(*a, |ga| {
                    let d = g[0] / E::from_f64(ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x = *x + d);
                });
            }
            Op::ReduceAxis { x, split, mean } => {
                acc!(*x, |gx| {
                    let f = if *mean { E::one() / E::from_f64(split.len as f64) } else { E::one() };
                    for o in 0..split.outer {
                        let src = &g[o * split.inner..][..split.inner];
                        for l in 0..split.len {
                            let dst = &mut gx[(o * split.len + l) * split.inner..][..split.inner];
                            dst.iter_mut().zip(src).for_each(|(x, &d)| *x = *x + d * f);
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                acc!(*x, |gx| gx.iter_mut().zip(&back).for_each(|(x, &d)| *x = *x + d));
            }
            Op::Concat { parts, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    acc!(p, |gp| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            let dst = &mut gp[o * len * inner..][..len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &d)| *x = *x + d);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, split, start, len } => {
                acc!(*x, |gx| {
                    for o in 0..split.outer {
                        let src = &g[o * len * split.inner..][..len * split.inner];
                        let dst = &mut gx[(o * split.len + start) * split.inner..][..len * split.inner];
                        dst.iter_mut().zip(src).for_each(|(x, &d)| *x = *x + d);
                    }
                });
            }
            Op::IndexSelect { x, split, indices } => {
                acc!(*x, |gx| {
                    let m = indices.len();
                    for o in 0..split.outer {
                        for (l, &i) in indices.iter().enumerate() {
                            let src = &g[(o * m + l) * split.inner..][..split.inner];
                            let dst = &mut gx[(o * split.len + i) * split.inner..][..split.inner];
                            dst.iter_mut().zip(src).for_each(|(x, &d)| *x = *x + d);
                        }
                    }
                });
            }
            Op::Repeat { x, times } => {
                acc!(*x, |gx| {
                    let width = gx.len();
                    for chunk in g.chunks(width).take(*times) {
                        gx.iter_mut().zip(chunk).for_each(|(x, &d)| *x = *x + d);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                acc!(*logits, |gl| {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / E::from_f64(labels.len() as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { E::one() } else { E::zero() };
                            gl[r * c + j] = gl[r * c + j] + scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the original handles.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
