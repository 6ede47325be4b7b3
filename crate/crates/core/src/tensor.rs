//! Dense row-major tensors and the forward kernels shared by the tape.
//!
//! Everything here is a pure function of its inputs. Backward kernels that
//! need more than a couple of lines also live here so the tape only has to
//! dispatch.

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                msg: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Column vector `[n x 1]`.
    pub fn column(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len(), 1],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument {
                op: "Tensor::from_rows",
                msg: "ragged rows".into(),
            });
        }
        Ok(Self {
            shape: vec![m, n],
            data: rows.concat(),
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.shape.len() == 2 && self.shape[0] == self.shape[1]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let n = self.shape[1];
        self.data[i * n + j] = v;
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidArgument {
                op,
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub(crate) fn t_matmul(&self, other: &Self) -> Self {
        let (k, m) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub(crate) fn matmul_t(&self, other: &Self) -> Self {
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[0];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (m, n) = self.expect_matrix("softmax_rows")?;
        if !self.all_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = self.data.clone();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Cholesky factor of a symmetric positive-definite matrix.
    pub fn cholesky(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::InvalidArgument {
                op: "cholesky",
                msg: format!("expected a square matrix, got {:?}", self.shape),
            });
        }
        let n = self.shape[0];
        let tol = T::lit(1e-9);
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (self.at(i, j), self.at(j, i));
                let gap = (a - b).abs();
                if gap > tol * T::one().max(a.abs()).max(b.abs()) {
                    return Err(Error::NotSymmetric {
                        row: i,
                        col: j,
                        gap: gap.as_f64(),
                    });
                }
            }
        }
        let mut l = Self::zeros(&[n, n]);
        for j in 0..n {
            let mut d = self.at(j, j);
            for p in 0..j {
                d -= l.at(j, p) * l.at(j, p);
            }
            if !(d > T::zero()) {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in j + 1..n {
                // symmetric average, so the factor is a function of sym(A)
                let mut s = (self.at(i, j) + self.at(j, i)) * T::lit(0.5);
                for p in 0..j {
                    s -= l.at(i, p) * l.at(j, p);
                }
                l.set(i, j, s / djj);
            }
        }
        Ok(l)
    }

    /// `(1/w)(X - x̄)(X - x̄)ᵀ + ridge·I` over the rows of a `c x w` matrix.
    pub fn covariance_rows(&self, ridge: T) -> Result<Self> {
        let (c, w) = self.expect_matrix("covariance_rows")?;
        if w == 0 {
            return Err(Error::Empty("covariance_rows"));
        }
        if !(ridge > T::zero()) {
            return Err(Error::InvalidArgument {
                op: "covariance_rows",
                msg: "ridge must be positive".into(),
            });
        }
        let centered = self.centered_rows();
        let mut cov = centered.matmul_t(&centered).scaled(T::one() / T::lit(w as f64));
        for i in 0..c {
            let v = cov.at(i, i) + ridge;
            cov.set(i, i, v);
        }
        Ok(cov)
    }

    pub(crate) fn centered_rows(&self) -> Self {
        let (c, w) = (self.shape[0], self.shape[1]);
        let mut out = self.clone();
        for i in 0..c {
            let row = &mut out.data[i * w..(i + 1) * w];
            let mean = row.iter().copied().sum::<T>() / T::lit(w as f64);
            for v in row.iter_mut() {
                *v -= mean;
            }
        }
        out
    }
}

/// Entrywise nonlinearities with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
}

impl UnaryKind {
    pub const ALL: [UnaryKind; 6] = [
        UnaryKind::Relu,
        UnaryKind::Tanh,
        UnaryKind::Sigmoid,
        UnaryKind::Softplus,
        UnaryKind::Exp,
        UnaryKind::Log,
    ];

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => scalar::sigmoid(x),
            UnaryKind::Softplus => scalar::softplus(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryKind::Tanh => T::one() - y * y,
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Softplus => scalar::sigmoid(x),
            UnaryKind::Exp => y,
            UnaryKind::Log => T::one() / x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
        }
    }
}

/// Applies `kind` entrywise; `log` rejects non-positive entries.
pub fn elementwise<T: Scalar>(kind: UnaryKind, x: &Tensor<T>) -> Result<Tensor<T>> {
    if kind == UnaryKind::Log {
        if let Some(index) = x.data().iter().position(|&v| !(v > T::zero())) {
            return Err(Error::LogDomain { index });
        }
    }
    Ok(x.map(|v| kind.apply(v)))
}

fn check_volume<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [c, d, h, w] if d >= 1 && h >= 1 && w >= 1 => Ok([c, d, h, w]),
        _ => Err(Error::InvalidArgument {
            op,
            msg: format!("expected C x D x H x W, got {:?}", t.shape()),
        }),
    }
}

/// 3x3x3 cross-correlation, stride 1, zero padding 1.
pub fn conv3d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let [cin, d, h, w] = check_volume(input, "conv3d")?;
    let cout = match *kernels.shape() {
        [co, ci, 3, 3, 3] if ci == cin => co,
        [_, ci, 3, 3, 3] => {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                left: input.shape().to_vec(),
                right: vec![ci],
            })
        }
        _ => {
            return Err(Error::InvalidArgument {
                op: "conv3d",
                msg: format!(
                    "kernel must be C_out x C_in x 3 x 3 x 3, got {:?}",
                    kernels.shape()
                ),
            })
        }
    };
    let vol = d * h * w;
    let mut out = vec![T::zero(); cout * vol];
    let x = input.data();
    let k = kernels.data();
    for co in 0..cout {
        let o = &mut out[co * vol..(co + 1) * vol];
        for ci in 0..cin {
            let xi = &x[ci * vol..(ci + 1) * vol];
            for kd in 0..3 {
                for kh in 0..3 {
                    for kw in 0..3 {
                        let wv = k[(((co * cin + ci) * 3 + kd) * 3 + kh) * 3 + kw];
                        if wv == T::zero() {
                            continue;
                        }
                        let (d0, d1) = conv_range(d, kd);
                        let (h0, h1) = conv_range(h, kh);
                        let (w0, w1) = conv_range(w, kw);
                        for z in d0..d1 {
                            let zi = z + kd - 1;
                            for y in h0..h1 {
                                let yi = y + kh - 1;
                                let orow = (z * h + y) * w;
                                let irow = (zi * h + yi) * w;
                                for xx in w0..w1 {
                                    o[orow + xx] += wv * xi[irow + xx + kw - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, d, h, w], out)
}

/// Output positions `p` for which `p + k - 1` is inside `[0, n)`.
#[inline]
fn conv_range(n: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n.saturating_sub(1) } else { n };
    (lo, hi.max(lo))
}

/// Gradients of `conv3d` with respect to input and kernels.
pub(crate) fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [cin, d, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let cout = kernels.shape()[0];
    let vol = d * h * w;
    let x = input.data();
    let k = kernels.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    for co in 0..cout {
        let go = &g[co * vol..(co + 1) * vol];
        for ci in 0..cin {
            let xi = &x[ci * vol..(ci + 1) * vol];
            let gxi_base = ci * vol;
            for kd in 0..3 {
                for kh in 0..3 {
                    for kw in 0..3 {
                        let kidx = (((co * cin + ci) * 3 + kd) * 3 + kh) * 3 + kw;
                        let wv = k[kidx];
                        let (d0, d1) = conv_range(d, kd);
                        let (h0, h1) = conv_range(h, kh);
                        let (w0, w1) = conv_range(w, kw);
                        let mut acc = T::zero();
                        for z in d0..d1 {
                            let zi = z + kd - 1;
                            for y in h0..h1 {
                                let yi = y + kh - 1;
                                let orow = (z * h + y) * w;
                                let irow = (zi * h + yi) * w;
                                for xx in w0..w1 {
                                    let gv = go[orow + xx];
                                    let ii = irow + xx + kw - 1;
                                    acc += gv * xi[ii];
                                    gx[gxi_base + ii] += gv * wv;
                                }
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: input.shape().to_vec(),
            data: gx,
        },
        Tensor {
            shape: kernels.shape().to_vec(),
            data: gk,
        },
    )
}

/// 2x2x2 max pooling. Returns the pooled tensor and, per output cell, the
/// linear input index of the first maximum in the window.
pub fn maxpool3d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [c, d, h, w] = check_volume(input, "maxpool3d")?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument {
            op: "maxpool3d",
            msg: format!("spatial extents must be even, got {:?}", input.shape()),
        });
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(c * od * oh * ow);
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((ch * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                // window is visited in increasing linear index, so a
                                // strict comparison keeps the lowest index on ties
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, od, oh, ow], out)?, arg))
}

/// Kernel-3, stride-1, pad-1 convolution over `C_in x W` signals.
pub fn conv1d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, w) = input.expect_matrix("conv1d")?;
    let cout = match *kernels.shape() {
        [co, ci, 3] if ci == cin => co,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: input.shape().to_vec(),
                right: kernels.shape().to_vec(),
            })
        }
    };
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![T::zero(); cout * w];
    for co in 0..cout {
        let o = &mut out[co * w..(co + 1) * w];
        for ci in 0..cin {
            let xi = &x[ci * w..(ci + 1) * w];
            for kk in 0..3 {
                let wv = k[(co * cin + ci) * 3 + kk];
                let (p0, p1) = conv_range(w, kk);
                for p in p0..p1 {
                    o[p] += wv * xi[p + kk - 1];
                }
            }
        }
    }
    Tensor::new(vec![cout, w], out)
}

pub(crate) fn conv1d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (cin, w) = (input.shape()[0], input.shape()[1]);
    let cout = kernels.shape()[0];
    let x = input.data();
    let k = kernels.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    for co in 0..cout {
        let go = &g[co * w..(co + 1) * w];
        for ci in 0..cin {
            for kk in 0..3 {
                let kidx = (co * cin + ci) * 3 + kk;
                let (p0, p1) = conv_range(w, kk);
                let mut acc = T::zero();
                for p in p0..p1 {
                    let ii = ci * w + p + kk - 1;
                    acc += go[p] * x[ii];
                    gx[ii] += go[p] * k[kidx];
                }
                gk[kidx] += acc;
            }
        }
    }
    (
        Tensor {
            shape: input.shape().to_vec(),
            data: gx,
        },
        Tensor {
            shape: kernels.shape().to_vec(),
            data: gk,
        },
    )
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub(crate) fn lower_inverse<T: Scalar>(l: &Tensor<T>) -> Tensor<T> {
    let n = l.rows();
    let mut inv = Tensor::zeros(&[n, n]);
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { T::one() } else { T::zero() };
            for p in col..i {
                s -= l.at(i, p) * inv.at(p, col);
            }
            inv.set(i, col, s / l.at(i, i));
        }
    }
    inv
}

/// Reverse-mode rule for `L = chol(sym(A))`:
/// `Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)` with Φ taking the lower triangle and halving
/// the diagonal.
pub(crate) fn cholesky_backward<T: Scalar>(l: &Tensor<T>, grad_l: &Tensor<T>) -> Tensor<T> {
    let n = l.rows();
    let mut p = l.t_matmul(grad_l);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p.set(i, j, T::zero());
            } else if j == i {
                let v = p.at(i, i) * T::lit(0.5);
                p.set(i, i, v);
            }
        }
    }
    let linv = lower_inverse(l);
    // L⁻ᵀ P L⁻¹
    let s = linv.t_matmul(&p).matmul(&linv).expect("square shapes");
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, (s.at(i, j) + s.at(j, i)) * T::lit(0.5));
        }
    }
    out
}
