//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. Nodes are only ever appended, so creation order is a
//! topological order and [`Graph::backward`] simply walks the tape in reverse.

use crate::element::{Element, Strides};
use crate::error::{dim_err, Result, TensorError};
use crate::tensor::Tensor;

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        qkv: Var,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax { .. } => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The gradient tape.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when the leaf did not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn check_2d<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(dim_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let one = T::one();
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    // tanh through a single exp; saturates cleanly at +-1
    let two = T::from_f64_lossy(2.0);
    let t = one - two / ((two * u).exp() + one);
    let value = half * x * (one + t);
    let du = c * (one + three * k * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// A graph that fails any op producing NaN or infinity.
    pub fn checked() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// A trainable input whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
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

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul", self.value(a))?;
        let (k2, n) = check_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            Strides::row_major(k),
            self.data(b),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        let value = Tensor::from_vec2(m, n, out)?;
        self.push(value, Op::MatMul { a, b, b_transposed: false }, &[a, b])
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul_bt", self.value(a))?;
        let (n, k2) = check_2d("matmul_bt", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul_bt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            Strides::row_major(k),
            self.data(b),
            Strides::transposed(k),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        let value = Tensor::from_vec2(m, n, out)?;
        self.push(value, Op::MatMul { a, b, b_transposed: true }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).numel() != n {
            return Err(dim_err(
                "add_bias",
                format!("rows of width {n}, bias of {} values", self.value(bias).numel()),
            ));
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v = *v + bb;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| gelu_parts(v).0);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of the row width.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(dim_err("layernorm", "affine parameters must match row width"));
        }
        let rows = self.value(x).rows();
        let eps = T::from_f64_lossy(LAYERNORM_EPS);
        let nt = T::from_usize(n).expect("width");
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        let (g, b) = (self.data(gamma), self.data(beta));
        for row in self.data(x).chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", format!("axis {axis} of shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Softmax { x, axis }, &[x])
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = check_2d("embedding", self.value(table))?;
        let value = self.select_rows("embedding", table, ids, v, d)?;
        self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = check_2d("gather_rows", self.value(x))?;
        let value = self.select_rows("gather_rows", x, idx, m, n)?;
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    fn select_rows(
        &self,
        op: &'static str,
        x: Var,
        idx: &[usize],
        rows: usize,
        cols: usize,
    ) -> Result<Tensor<T>> {
        if idx.is_empty() {
            return Err(dim_err(op, "empty index list"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= rows {
                return Err(TensorError::Index {
                    op,
                    index: r,
                    limit: rows,
                });
            }
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        Tensor::from_vec2(idx.len(), cols, out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err("concat_rows", "nothing to concatenate"))?;
        let (_, n) = check_2d("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, c) = check_2d("concat_rows", self.value(p))?;
            if c != n {
                return Err(dim_err("concat_rows", format!("width {c} vs {n}")));
            }
            rows += m;
            out.extend_from_slice(self.data(p));
        }
        let value = Tensor::from_vec2(rows, n, out)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = check_2d("transpose", self.value(x))?;
        let src = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::from_vec2(n, m, out)?;
        self.push(value, Op::Transpose(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).numel()).expect("count");
        let total = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(total / n), Op::Mean(x), &[x])
    }

    /// Multi-head scaled dot-product attention over packed `[q | k | v]` rows.
    ///
    /// `qkv` is `R x 3D`; `segments` partitions the `R` rows into independent
    /// sequences (attention never crosses a segment boundary). With `causal`
    /// set, row `i` of a segment attends only to rows `<= i`.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        segments: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let (rows, width) = check_2d("attention", self.value(qkv))?;
        if heads == 0 || width % (3 * heads) != 0 {
            return Err(dim_err(
                "attention",
                format!("width {width} not divisible into 3 x {heads} heads"),
            ));
        }
        if segments.iter().sum::<usize>() != rows || segments.iter().any(|&l| l == 0) {
            return Err(dim_err(
                "attention",
                format!("segments {segments:?} do not tile {rows} rows"),
            ));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let src = self.data(qkv);
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|l| l * l * heads).sum());
        let mut start = 0;
        for &len in segments {
            for h in 0..heads {
                let base = probs.len();
                probs.resize(base + len * len, T::zero());
                let p = &mut probs[base..];
                let q_off = start * width + h * dh;
                let k_off = start * width + d + h * dh;
                let v_off = start * width + 2 * d + h * dh;
                // scores = q k^T * scale
                T::gemm(
                    len,
                    dh,
                    len,
                    scale,
                    &src[q_off..],
                    Strides::row_major(width),
                    &src[k_off..],
                    Strides::transposed(width),
                    T::zero(),
                    p,
                    Strides::row_major(len),
                );
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let visible = if causal { i + 1 } else { len };
                    let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for s in row[..visible].iter_mut() {
                        *s = (*s - max).exp();
                        total = total + *s;
                    }
                    for s in row[..visible].iter_mut() {
                        *s = *s / total;
                    }
                    for s in row[visible..].iter_mut() {
                        *s = T::zero();
                    }
                }
                T::gemm(
                    len,
                    len,
                    dh,
                    T::one(),
                    p,
                    Strides::row_major(len),
                    &src[v_off..],
                    Strides::row_major(width),
                    T::zero(),
                    &mut out[start * d + h * dh..],
                    Strides::row_major(d),
                );
            }
            start += len;
        }
        let value = Tensor::from_vec2(rows, d, out)?;
        self.push(
            value,
            Op::Attention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            &[qkv],
        )
    }

    /// Mean of `-log softmax(logits)[t, target_t]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = check_2d("cross_entropy", self.value(logits))?;
        if targets.len() != rows {
            return Err(dim_err(
                "cross_entropy",
                format!("{rows} rows but {} targets", targets.len()),
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    limit: vocab,
                });
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z = z + *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / z;
            }
            total = total + (z.ln() + max - row[t]);
        }
        let count_t = T::from_usize(count).expect("count");
        let value = Tensor::scalar(total / count_t);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (a, b, bt) = (*a, *b, *b_transposed);
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = node.value.shape()[1];
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(ga) = slot(&self.nodes, grads, a) {
                    // dA = dC * B^T   (or dC * B when b was transposed)
                    let sb = if bt { Strides::row_major(k) } else { Strides::transposed(n) };
                    T::gemm(m, n, k, T::one(), g, Strides::row_major(n), bd, sb, T::one(), ga, Strides::row_major(k));
                }
                if let Some(gb) = slot(&self.nodes, grads, b) {
                    if bt {
                        // dB[n x k] = dC^T * A
                        T::gemm(n, m, k, T::one(), g, Strides::transposed(n), ad, Strides::row_major(k), T::one(), gb, Strides::row_major(k));
                    } else {
                        // dB[k x n] = A^T * dC
                        T::gemm(k, m, n, T::one(), ad, Strides::transposed(k), g, Strides::row_major(n), T::one(), gb, Strides::row_major(n));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(&self.nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(gb) = slot(&self.nodes, grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x = *x + gy * bv;
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *x = *x + gy * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *s);
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(ad) {
                        if v > T::zero() {
                            *x = *x + gy;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(ad) {
                        *x = *x + gy * gelu_parts(v).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                let gd = self.data(*gamma);
                if let Some(gg) = slot(&self.nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gbeta) = slot(&self.nodes, grads, *beta) {
                    for grow in g.chunks_exact(n) {
                        gbeta.iter_mut().zip(grow).for_each(|(x, &y)| *x = *x + y);
                    }
                }
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    let nt = T::from_usize(n).expect("width");
                    for (r, ((grow, hrow), gxrow)) in g
                        .chunks_exact(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let d = grow[j] * gd[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hrow[j];
                        }
                        mean_d = mean_d / nt;
                        mean_dh = mean_dh / nt;
                        for j in 0..n {
                            let d = grow[j] * gd[j];
                            gxrow[j] = gxrow[j] + rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot = (0..n).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..n {
                                let k = at(j);
                                gx[k] = gx[k] + y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table: src, ids } | Op::GatherRows { x: src, idx: ids } => {
                let cols = node.value.cols();
                if let Some(gs) = slot(&self.nodes, grads, *src) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gs[id * cols..(id + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = slot(&self.nodes, grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(x, &y)| *x = *x + y);
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel()).expect("count");
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    let d = g[0] / n;
                    ga.iter_mut().for_each(|x| *x = *x + d);
                }
            }
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
                ..
            } => {
                let src = self.data(*qkv);
                if let Some(gq) = slot(&self.nodes, grads, *qkv) {
                    attention_backward(src, gq, g, probs, *heads, segments);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / T::from_usize(*count).expect("count");
                if let Some(gl) = slot(&self.nodes, grads, *logits) {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for (x, &pj) in row.iter_mut().zip(p) {
                            *x = *x + scale * pj;
                        }
                        row[t] = row[t] - scale;
                    }
                }
            }
        }
    }
}

fn slot<'g, T: Element>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn attention_backward<T: Element>(
    src: &[T],
    gsrc: &mut [T],
    gout: &[T],
    probs: &[T],
    heads: usize,
    segments: &[usize],
) {
    let width = gsrc.len() / segments.iter().sum::<usize>();
    let d = width / 3;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let max_len = segments.iter().copied().max().unwrap_or(0);
    let mut dp = vec![T::zero(); max_len * max_len];
    let mut start = 0;
    let mut pbase = 0;
    for &len in segments {
        for h in 0..heads {
            let p = &probs[pbase..pbase + len * len];
            pbase += len * len;
            let q_off = start * width + h * dh;
            let k_off = start * width + d + h * dh;
            let v_off = start * width + 2 * d + h * dh;
            let o_off = start * d + h * dh;
            // dV = P^T dO
            T::gemm(
                len, len, dh, T::one(), p, Strides::transposed(len), &gout[o_off..],
                Strides::row_major(d), T::one(), &mut gsrc[v_off..], Strides::row_major(width),
            );
            // dP = dO V^T
            let dp = &mut dp[..len * len];
            T::gemm(
                len, dh, len, T::one(), &gout[o_off..], Strides::row_major(d), &src[v_off..],
                Strides::transposed(width), T::zero(), dp, Strides::row_major(len),
            );
            // dS = P * (dP - rowsum(dP * P)), then fold in the score scale
            for i in 0..len {
                let prow = &p[i * len..(i + 1) * len];
                let drow = &mut dp[i * len..(i + 1) * len];
                let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            // dQ = dS K ; dK = dS^T Q
            T::gemm(
                len, len, dh, T::one(), dp, Strides::row_major(len), &src[k_off..],
                Strides::row_major(width), T::one(), &mut gsrc[q_off..], Strides::row_major(width),
            );
            T::gemm(
                len, len, dh, T::one(), dp, Strides::transposed(len), &src[q_off..],
                Strides::row_major(width), T::one(), &mut gsrc[k_off..], Strides::row_major(width),
            );
        }
        start += len;
    }
}
