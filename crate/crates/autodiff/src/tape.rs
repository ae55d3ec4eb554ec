use crate::{Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    SoftmaxRows(Var),
    RmsNorm { input: Var, inv_rms: Vec<T> },
    Gelu(Var),
    Mse { pred: Var, target: Var },
    SumAll(Var),
    Rotary { input: Var, cos: Vec<T>, sin: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Gradients of a scalar loss, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, or `None` when it does not require one. A leaf
    /// that requires a gradient but is disconnected from the loss gets zeros.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        if !self.requires[var.0] {
            return None;
        }
        let shape = self.shapes[var.0].clone();
        Some(match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if !self.requires[var.0] {
            return None;
        }
        let shape = self.shapes[var.0].clone();
        Some(match self.grads[var.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// (outer, axis length, inner) decomposition used by concat and slice.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Every op fails with [`TensorError::NonFinite`] if it produces NaN/Inf.
    pub fn with_finite_checks() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records an input; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op_name(&op),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds `bias` to every trailing-dimension row of `a`. This is the only
    /// broadcasting the tape supports.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let vb = self.value(bias);
        let last = *va.shape().last().unwrap_or(&0);
        if vb.numel() != last || last == 0 {
            return Err(shape_err("add_bias", va.shape(), vb.shape()));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(last) {
            row.iter_mut().zip(vb.data()).for_each(|(x, &b)| *x += b);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x * s).collect())?;
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let value = self.value(a).clone().with_requires_grad(false).reshaped(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                shape,
            });
        }
        if start > end || end > shape[axis] {
            return Err(TensorError::Range {
                op: "slice",
                start,
                end,
                len: shape[axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = (end - start) * inner;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            out.extend_from_slice(&src[base..base + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let cols = *va.shape().last().unwrap_or(&0);
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// `x / sqrt(mean(x²) + eps)` over the last axis, no learned gain.
    pub fn rms_norm(&mut self, a: Var, eps: T) -> Result<Var, TensorError> {
        let va = self.value(a);
        let cols = *va.shape().last().unwrap_or(&0);
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op: "rms_norm" });
        }
        let n = T::of(cols as f64);
        let mut data = va.data().to_vec();
        let mut inv_rms = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let ms = row.iter().map(|&x| x * x).sum::<T>() / n;
            let inv = T::one() / (ms + eps).sqrt();
            row.iter_mut().for_each(|x| *x *= inv);
            inv_rms.push(inv);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::RmsNorm { input: a, inv_rms }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let (c, k) = (T::of(GELU_C), T::of(GELU_K));
        let half = T::of(0.5);
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Mean squared error, a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(shape_err("mse", vp.shape(), vt.shape()));
        }
        if vp.numel() == 0 {
            return Err(TensorError::EmptyAxis { op: "mse" });
        }
        let sum: T = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sum / T::of(vp.numel() as f64));
        self.push(value, Op::Mse { pred, target }, &[pred, target])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(a).data().iter().copied().sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    /// Rotates consecutive pairs `(x[2i], x[2i+1])` of every row by the angle
    /// whose cosine and sine are given in `cos`/`sin`, each of shape
    /// `[rows, cols/2]`.
    pub fn rotary(&mut self, a: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2("rotary", a)?;
        if cols % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "rotary: odd row width {cols}"
            )));
        }
        let half = cols / 2;
        if cos.len() != rows * half || sin.len() != rows * half {
            return Err(shape_err("rotary", &[rows, half], &[cos.len()]));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for p in 0..half {
                let (c, s) = (cos[r * half + p], sin[r * half + p]);
                let (x0, x1) = (src[r * cols + 2 * p], src[r * cols + 2 * p + 1]);
                out[r * cols + 2 * p] = x0 * c - x1 * s;
                out[r * cols + 2 * p + 1] = x0 * s + x1 * c;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push(value, Op::Rotary { input: a, cos, sin }, &[a])
    }

    /// Repeats a `[1, n]` row vector `rows` times via an outer product with a
    /// constant ones column.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Result<Var, TensorError> {
        let ones = self.constant(Tensor::full(vec![rows, 1], T::one()));
        self.matmul(ones, row)
    }

    /// Reverse-mode pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matmul lhs");
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); m * k]);
                    T::gemm(m, n, k, g, n, 1, self.value(*b).data(), 1, n, T::one(), slot);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let slot = grads[b.0].get_or_insert_with(|| vec![T::zero(); k * n]);
                    T::gemm(k, m, n, self.value(*a).data(), 1, k, g, n, 1, T::one(), slot);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::AddBias(a, bias) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*bias) {
                    let width = self.value(*bias).numel();
                    let mut col = vec![T::zero(); width];
                    for row in g.chunks(width) {
                        col.iter_mut().zip(row).for_each(|(c, &x)| *c += x);
                    }
                    accumulate_owned(&mut grads[bias.0], col);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let gb: Vec<T> =
                        g.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate_owned(&mut grads[a.0], gb);
                }
                if self.wants(*b) {
                    let ga: Vec<T> =
                        g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate_owned(&mut grads[b.0], ga);
                }
            }
            Op::Scale(a, s) => {
                accumulate_owned(&mut grads[a.0], g.iter().map(|&x| x * *s).collect());
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("transpose input");
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = g[j * r + i];
                    }
                }
                accumulate_owned(&mut grads[a.0], out);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.wants(*v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate_owned(&mut grads[v.0], part);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input);
                let (outer, len, inner) = split_axis(shape, *axis);
                let width = node.value.shape()[*axis] * inner;
                let slot = grads[input.0].get_or_insert_with(|| vec![T::zero(); outer * len * inner]);
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    slot[base..base + width]
                        .iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                        .for_each(|(s, &x)| *s += x);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut out = vec![T::zero(); y.len()];
                for ((orow, yrow), grow) in out.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = p * (q - dot);
                    }
                }
                accumulate_owned(&mut grads[a.0], out);
            }
            Op::RmsNorm { input, inv_rms } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let n = T::of(cols as f64);
                let mut out = vec![T::zero(); y.len()];
                for (((orow, yrow), grow), &inv) in out
                    .chunks_mut(cols)
                    .zip(y.chunks(cols))
                    .zip(g.chunks(cols))
                    .zip(inv_rms)
                {
                    let mean: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum::<T>() / n;
                    for ((o, &p), &q) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = inv * (q - p * mean);
                    }
                }
                accumulate_owned(&mut grads[input.0], out);
            }
            Op::Gelu(a) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_K));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let out = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &q)| {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + th)
                            + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        d * q
                    })
                    .collect();
                accumulate_owned(&mut grads[a.0], out);
            }
            Op::Mse { pred, target } => {
                let (vp, vt) = (self.value(*pred).data(), self.value(*target).data());
                let coef = T::of(2.0) * g[0] / T::of(vp.len() as f64);
                let diff: Vec<T> = vp.iter().zip(vt).map(|(&p, &t)| coef * (p - t)).collect();
                if self.wants(*target) {
                    accumulate_owned(&mut grads[target.0], diff.iter().map(|&d| -d).collect());
                }
                if self.wants(*pred) {
                    accumulate_owned(&mut grads[pred.0], diff);
                }
            }
            Op::SumAll(a) => {
                accumulate_owned(&mut grads[a.0], vec![g[0]; self.value(*a).numel()]);
            }
            Op::Rotary { input, cos, sin } => {
                let cols = node.value.shape()[1];
                let half = cols / 2;
                let mut out = vec![T::zero(); g.len()];
                for (r, (orow, grow)) in out.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    for p in 0..half {
                        let (c, s) = (cos[r * half + p], sin[r * half + p]);
                        let (g0, g1) = (grow[2 * p], grow[2 * p + 1]);
                        orow[2 * p] = g0 * c + g1 * s;
                        orow[2 * p + 1] = g1 * c - g0 * s;
                    }
                }
                accumulate_owned(&mut grads[input.0], out);
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Reshape(..) => "reshape",
        Op::Transpose(..) => "transpose",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::SoftmaxRows(..) => "softmax",
        Op::RmsNorm { .. } => "rms_norm",
        Op::Gelu(..) => "gelu",
        Op::Mse { .. } => "mse",
        Op::SumAll(..) => "sum_all",
        Op::Rotary { .. } => "rotary",
    }
}
