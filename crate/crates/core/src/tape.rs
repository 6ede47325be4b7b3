//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes only refer to earlier nodes, so the tape order is a topological
//! order and [`Tape::backward`] is a single reverse sweep. Gradients
//! accumulate additively across fan-out.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor, UnaryKind};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Unary(UnaryKind, Var),
    TriMap {
        x: Var,
        off: Option<UnaryKind>,
        diag: Option<UnaryKind>,
    },
    CholGroup(Var, Var),
    LowerMask(Var),
    Sum(Var),
    SoftmaxRows(Var),
    Gather(Var, Rc<[usize]>),
    Scatter(Var, Rc<[usize]>),
    Reshape(Var),
    Concat(Vec<Var>),
    Conv3d(Var, Var),
    MaxPool3d(Var, Vec<usize>),
    Conv1d(Var, Var),
    Cholesky(Var),
    Covariance(Var),
    ClampMin(Var, T),
    Powf(Var, T),
    AddChannelBias(Var, Var),
    ScaleChannels(Var, Var),
    Corrupted(Var, T),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every node that needs one.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` does not reach
    /// the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl<T: Scalar> Tape<T> {
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Differentiable leaf, typically a parameter.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Single entry of a one-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.derived(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scaled(c);
        self.derived(value, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.derived(value, Op::AddConst(a), &[a])
    }

    /// `x * s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::InvalidArgument {
                op: "mul_scalar",
                msg: format!("scale must have one element, got {:?}", self.shape(s)),
            });
        }
        let c = self.scalar_value(s);
        let value = self.value(x).scaled(c);
        Ok(self.derived(value, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `w·x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        self.add(wx, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let value = tensor::elementwise(kind, self.value(a))?;
        Ok(self.derived(value, Op::Unary(kind, a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a).expect("relu is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a).expect("softplus is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    /// On a square matrix: applies `off` to strictly-lower entries and `diag`
    /// to the diagonal (`None` keeps them), and zeroes the upper triangle.
    pub fn tri_map(
        &mut self,
        x: Var,
        off: Option<UnaryKind>,
        diag: Option<UnaryKind>,
    ) -> Result<Var> {
        let src = self.value(x);
        if !src.is_square() {
            return Err(Error::InvalidArgument {
                op: "tri_map",
                msg: format!("expected a square matrix, got {:?}", src.shape()),
            });
        }
        let n = src.rows();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..i {
                let v = src.at(i, j);
                out.set(i, j, off.map_or(v, |k| k.apply(v)));
            }
            let v = src.at(i, i);
            if diag == Some(UnaryKind::Log) && !(v > T::zero()) {
                return Err(Error::LogDomain { index: i * n + i });
            }
            out.set(i, i, diag.map_or(v, |k| k.apply(v)));
        }
        Ok(self.derived(out, Op::TriMap { x, off, diag }, &[x]))
    }

    /// Strict-lower parts added, diagonals multiplied, upper zero.
    pub fn chol_group(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "chol_group")?;
        if !va.is_square() {
            return Err(Error::InvalidArgument {
                op: "chol_group",
                msg: format!("expected square matrices, got {:?}", va.shape()),
            });
        }
        let n = va.rows();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..i {
                out.set(i, j, va.at(i, j) + vb.at(i, j));
            }
            out.set(i, i, va.at(i, i) * vb.at(i, i));
        }
        Ok(self.derived(out, Op::CholGroup(a, b), &[a, b]))
    }

    /// Zeroes the strictly-upper triangle.
    pub fn lower_mask(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.expect_matrix("lower_mask")?;
        let mut out = src.clone();
        for i in 0..m {
            for j in i + 1..n {
                out.set(i, j, T::zero());
            }
        }
        Ok(self.derived(out, Op::LowerMask(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.derived(value, Op::Sum(a), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        Ok(self.derived(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Picks flat entries `idx` of `x` into a column vector.
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let src = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {:?}", src.shape()),
            });
        }
        let data: Vec<T> = idx.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::column(data);
        Ok(self.derived(value, Op::Gather(x, idx.clone()), &[x]))
    }

    /// Places the entries of `x` at flat positions `idx` of a zero tensor of
    /// the given shape. Indices must be distinct.
    pub fn scatter(&mut self, x: Var, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.len() != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter",
                left: src.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let mut out = Tensor::zeros(shape);
        for (k, &i) in idx.iter().enumerate() {
            if i >= out.len() {
                return Err(Error::InvalidArgument {
                    op: "scatter",
                    msg: format!("index {i} out of range for {shape:?}"),
                });
            }
            out.data_mut()[i] = src.data()[k];
        }
        Ok(self.derived(out, Op::Scatter(x, idx), &[x]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    /// Flattens and concatenates into a single column vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::column(data);
        Ok(self.derived(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn conv3d(&mut self, input: Var, kernels: Var) -> Result<Var> {
        let value = tensor::conv3d(self.value(input), self.value(kernels))?;
        Ok(self.derived(value, Op::Conv3d(input, kernels), &[input, kernels]))
    }

    pub fn maxpool3d(&mut self, input: Var) -> Result<Var> {
        let (value, arg) = tensor::maxpool3d(self.value(input))?;
        Ok(self.derived(value, Op::MaxPool3d(input, arg), &[input]))
    }

    pub fn conv1d(&mut self, input: Var, kernels: Var) -> Result<Var> {
        let value = tensor::conv1d(self.value(input), self.value(kernels))?;
        Ok(self.derived(value, Op::Conv1d(input, kernels), &[input, kernels]))
    }

    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).cholesky()?;
        Ok(self.derived(value, Op::Cholesky(a), &[a]))
    }

    pub fn covariance_rows(&mut self, x: Var, ridge: T) -> Result<Var> {
        let value = self.value(x).covariance_rows(ridge)?;
        Ok(self.derived(value, Op::Covariance(x), &[x]))
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.derived(value, Op::ClampMin(a, floor), &[a])
    }

    /// `x^p` for a constant exponent on non-negative inputs.
    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        let src = self.value(a);
        if let Some(index) = src.data().iter().position(|&x| x < T::zero()) {
            return Err(Error::InvalidArgument {
                op: "powf",
                msg: format!("negative base at index {index}"),
            });
        }
        let value = src.map(|x| x.powf(p));
        Ok(self.derived(value, Op::Powf(a, p), &[a]))
    }

    /// Adds `b[c]` to every entry of channel `c` of `x` (`C x ...`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = self.channel_map(x, b, "add_channel_bias", |v, s| v + s)?;
        Ok(self.derived(value, Op::AddChannelBias(x, b), &[x, b]))
    }

    /// Multiplies channel `c` of `x` (`C x ...`) by `w[c]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = self.channel_map(x, w, "scale_channels", |v, s| v * s)?;
        Ok(self.derived(value, Op::ScaleChannels(x, w), &[x, w]))
    }

    fn channel_map(
        &self,
        x: Var,
        per_channel: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (src, s) = (self.value(x), self.value(per_channel));
        let c = src.shape()[0];
        if s.len() != c {
            return Err(Error::ShapeMismatch {
                op,
                left: src.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        let block = src.len() / c.max(1);
        let mut out = src.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(block.max(1)).enumerate() {
            let sv = s.data()[ch];
            for v in chunk {
                *v = f(*v, sv);
            }
        }
        Ok(out)
    }

    /// Identity in the forward pass whose backward rule multiplies the
    /// gradient by `factor`. Exists only to give gradient checkers a
    /// negative control.
    #[doc(hidden)]
    pub fn corrupted_identity(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).clone();
        self.derived(value, Op::Corrupted(a, factor), &[a])
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_val.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scaled(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = g.zip_map(vb, "mul", |x, y| x * y).expect("shapes");
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.zip_map(va, "mul", |x, y| x * y).expect("shapes");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.wants(*a) {
                    let ga = g.zip_map(vb, "div", |x, y| x / y).expect("shapes");
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    // d(a/b)/db = -y/b
                    let t = g.zip_map(y, "div", |x, q| x * q).expect("shapes");
                    let gb = t.zip_map(vb, "div", |x, d| -x / d).expect("shapes");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scaled(*c)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Corrupted(a, factor) => self.accumulate(grads, *a, g.scaled(*factor)),
            Op::MulScalar(x, s) => {
                let c = self.scalar_value(*s);
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.scaled(c));
                }
                if self.wants(*s) {
                    let d: T = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    let shape = self.shape(*s).to_vec();
                    self.accumulate(grads, *s, Tensor::filled(&shape, d));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(vb));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, va.t_matmul(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose().expect("matrix")),
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::TriMap { x, off, diag } => {
                let src = self.value(*x);
                let n = src.rows();
                let mut out = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..i {
                        let d = off.map_or(T::one(), |k| k.derivative(src.at(i, j), y.at(i, j)));
                        out.set(i, j, g.at(i, j) * d);
                    }
                    let d = diag.map_or(T::one(), |k| k.derivative(src.at(i, i), y.at(i, i)));
                    out.set(i, i, g.at(i, i) * d);
                }
                self.accumulate(grads, *x, out);
            }
            Op::CholGroup(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = va.rows();
                for (target, other) in [(*a, vb), (*b, va)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let mut out = Tensor::zeros(&[n, n]);
                    for i in 0..n {
                        for j in 0..i {
                            out.set(i, j, g.at(i, j));
                        }
                        out.set(i, i, g.at(i, i) * other.at(i, i));
                    }
                    self.accumulate(grads, target, out);
                }
            }
            Op::LowerMask(a) => {
                let mut out = g.clone();
                let (m, n) = (out.rows(), out.cols());
                for i in 0..m {
                    for j in i + 1..n {
                        out.set(i, j, T::zero());
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.data()[0]));
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (y.rows(), y.cols());
                let mut out = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let mut dotv = T::zero();
                    for j in 0..n {
                        dotv += g.at(i, j) * y.at(i, j);
                    }
                    for j in 0..n {
                        out.set(i, j, y.at(i, j) * (g.at(i, j) - dotv));
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Gather(x, idx) => {
                let mut out = Tensor::zeros(self.shape(*x));
                for (k, &i) in idx.iter().enumerate() {
                    out.data_mut()[i] += g.data()[k];
                }
                self.accumulate(grads, *x, out);
            }
            Op::Scatter(x, idx) => {
                let data = idx.iter().map(|&i| g.data()[i]).collect();
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, data).expect("shape"));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape).expect("shape"));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let data = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(shape, data).expect("shape"));
                    }
                    offset += n;
                }
            }
            Op::Conv3d(x, k) => {
                let (gx, gk) = tensor::conv3d_backward(self.value(*x), self.value(*k), g);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *k, gk);
            }
            Op::MaxPool3d(x, arg) => {
                let mut out = Tensor::zeros(self.shape(*x));
                for (k, &i) in arg.iter().enumerate() {
                    out.data_mut()[i] += g.data()[k];
                }
                self.accumulate(grads, *x, out);
            }
            Op::Conv1d(x, k) => {
                let (gx, gk) = tensor::conv1d_backward(self.value(*x), self.value(*k), g);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *k, gk);
            }
            Op::Cholesky(a) => {
                self.accumulate(grads, *a, tensor::cholesky_backward(y, g));
            }
            Op::Covariance(x) => {
                // C = Xc Xcᵀ / w + ridge I  =>  X̄ = (G + Gᵀ) Xc / w; the
                // centering projection is absorbed because rows of Xc sum to 0.
                let src = self.value(*x);
                let w = T::lit(src.cols() as f64);
                let xc = src.centered_rows();
                let n = g.rows();
                let mut gs = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..n {
                        gs.set(i, j, (g.at(i, j) + g.at(j, i)) / w);
                    }
                }
                self.accumulate(grads, *x, gs.matmul(&xc).expect("shapes"));
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > *floor { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::Powf(a, p) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| {
                        if *p == T::zero() {
                            T::zero()
                        } else {
                            gv * *p * xv.powf(*p - T::one())
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::AddChannelBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let block = g.len() / c;
                    let data = g.data().chunks(block).map(|ch| ch.iter().copied().sum()).collect();
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, data).expect("shape"));
                }
            }
            Op::ScaleChannels(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let c = vw.len();
                let block = vx.len() / c;
                if self.wants(*x) {
                    let mut out = g.clone();
                    for (ch, chunk) in out.data_mut().chunks_mut(block).enumerate() {
                        for v in chunk {
                            *v *= vw.data()[ch];
                        }
                    }
                    self.accumulate(grads, *x, out);
                }
                if self.wants(*w) {
                    let data = g
                        .data()
                        .chunks(block)
                        .zip(vx.data().chunks(block))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let shape = vw.shape().to_vec();
                    self.accumulate(grads, *w, Tensor::new(shape, data).expect("shape"));
                }
            }
        }
    }
}
