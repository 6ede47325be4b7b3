//! Cholesky space: lower-triangular matrices with positive diagonal.
//!
//! The geometry is the flat one obtained by taking the entrywise logarithm
//! of the diagonal ("log-coordinates"). In those coordinates the group
//! operation is addition, the weighted Fréchet mean is a weighted average,
//! and the distance is a Frobenius norm.
//!
//! Both point types store the `Q(Q+1)/2` lower-triangular entries packed
//! row by row: entry `(i, j)` with `j <= i` lives at `i(i+1)/2 + j`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_PROJECTION_FLOOR: f64 = 1e-8;

#[inline]
pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Flat row-major indices of the lower triangle of a `dim x dim` matrix, in
/// packed order. Used to vectorize tangent vectors on the tape.
pub fn lower_indices(dim: usize) -> Rc<[usize]> {
    let mut v = Vec::with_capacity(packed_len(dim));
    for i in 0..dim {
        for j in 0..=i {
            v.push(i * dim + j);
        }
    }
    v.into()
}

/// Positions of the diagonal entries inside the packed vector.
pub fn packed_diagonal(dim: usize) -> Vec<usize> {
    (0..dim).map(|i| packed_index(i, i)).collect()
}

fn dim_from_packed(len: usize) -> Option<usize> {
    let mut q = 0;
    while packed_len(q) < len {
        q += 1;
    }
    (packed_len(q) == len).then_some(q)
}

macro_rules! packed_common {
    ($ty:ident) => {
        impl<T: Scalar> $ty<T> {
            pub fn dim(&self) -> usize {
                self.dim
            }

            /// Packed lower-triangular entries.
            pub fn packed(&self) -> &[T] {
                &self.entries
            }

            #[inline]
            pub fn get(&self, i: usize, j: usize) -> T {
                if j > i {
                    T::zero()
                } else {
                    self.entries[packed_index(i, j)]
                }
            }

            pub fn diagonal(&self) -> Vec<T> {
                (0..self.dim).map(|i| self.get(i, i)).collect()
            }

            /// Dense `dim x dim` matrix with exact zeros above the diagonal.
            pub fn to_tensor(&self) -> Tensor<T> {
                let n = self.dim;
                let mut t = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..=i {
                        t.set(i, j, self.get(i, j));
                    }
                }
                t
            }
        }
    };
}

/// Lower-triangular matrix with strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholPoint<T> {
    dim: usize,
    entries: Vec<T>,
}

/// Unconstrained lower-triangular matrix: log-coordinates of a
/// [`CholPoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVec<T> {
    dim: usize,
    entries: Vec<T>,
}

packed_common!(CholPoint);
packed_common!(TangentVec);

impl<T: Scalar> CholPoint<T> {
    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimMismatch(self.dim, other.dim));
        }
        Ok(())
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![T::zero(); packed_len(dim)];
        for i in 0..dim {
            entries[packed_index(i, i)] = T::one();
        }
        Self { dim, entries }
    }

    pub fn from_packed(entries: Vec<T>) -> Result<Self> {
        let dim = dim_from_packed(entries.len()).ok_or_else(|| {
            Error::InvalidPoint(format!("{} is not a triangular count", entries.len()))
        })?;
        let p = Self { dim, entries };
        p.validate()?;
        Ok(p)
    }

    /// Reads the lower triangle of a square matrix; fails if anything above
    /// the diagonal is non-zero or the diagonal is not positive.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if !t.is_square() {
            return Err(Error::InvalidPoint(format!("not square: {:?}", t.shape())));
        }
        let n = t.rows();
        let mut entries = Vec::with_capacity(packed_len(n));
        for i in 0..n {
            for j in 0..n {
                if j <= i {
                    entries.push(t.at(i, j));
                } else if t.at(i, j) != T::zero() {
                    return Err(Error::InvalidPoint(format!("upper entry ({i},{j}) is non-zero")));
                }
            }
        }
        let p = Self { dim: n, entries };
        p.validate()?;
        Ok(p)
    }

    pub fn from_diagonal(diag: &[T]) -> Result<Self> {
        let n = diag.len();
        let mut entries = vec![T::zero(); packed_len(n)];
        for (i, &d) in diag.iter().enumerate() {
            entries[packed_index(i, i)] = d;
        }
        let p = Self { dim: n, entries };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.dim {
            let d = self.get(i, i);
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::InvalidPoint(format!("diagonal entry {i} is {d}")));
            }
        }
        if let Some(k) = self.entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPoint(format!("packed entry {k} is not finite")));
        }
        Ok(())
    }

    pub fn min_diagonal(&self) -> T {
        self.diagonal()
            .into_iter()
            .fold(T::infinity(), |a, b| a.min(b))
    }
}

impl<T: Scalar> TangentVec<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![T::zero(); packed_len(dim)],
        }
    }

    pub fn from_packed(entries: Vec<T>) -> Result<Self> {
        let dim = dim_from_packed(entries.len()).ok_or_else(|| Error::InvalidArgument {
            op: "TangentVec::from_packed",
            msg: format!("{} is not a triangular count", entries.len()),
        })?;
        Ok(Self { dim, entries })
    }

    /// Reads the lower triangle; the upper triangle must be exactly zero.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if !t.is_square() {
            return Err(Error::InvalidArgument {
                op: "TangentVec::from_tensor",
                msg: format!("not square: {:?}", t.shape()),
            });
        }
        let n = t.rows();
        let mut entries = Vec::with_capacity(packed_len(n));
        for i in 0..n {
            for j in 0..n {
                if j <= i {
                    entries.push(t.at(i, j));
                } else if t.at(i, j) != T::zero() {
                    return Err(Error::InvalidArgument {
                        op: "TangentVec::from_tensor",
                        msg: format!("upper entry ({i},{j}) is non-zero"),
                    });
                }
            }
        }
        Ok(Self { dim: n, entries })
    }

    pub fn norm(&self) -> T {
        self.entries.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Strict-lower part copied, diagonal replaced by its logarithm.
pub fn chol_log<T: Scalar>(l: &CholPoint<T>) -> Result<TangentVec<T>> {
    l.validate()?;
    let mut entries = l.entries.clone();
    for k in packed_diagonal(l.dim) {
        entries[k] = entries[k].ln();
    }
    Ok(TangentVec {
        dim: l.dim,
        entries,
    })
}

/// Strict-lower part copied, diagonal exponentiated.
pub fn chol_exp<T: Scalar>(t: &TangentVec<T>) -> CholPoint<T> {
    let mut entries = t.entries.clone();
    for k in packed_diagonal(t.dim) {
        entries[k] = entries[k].exp();
    }
    CholPoint { dim: t.dim, entries }
}

/// Commutative group operation: strict-lower parts add, diagonals multiply.
pub fn group_op<T: Scalar>(a: &CholPoint<T>, b: &CholPoint<T>) -> Result<CholPoint<T>> {
    a.check_dims(b)?;
    let mut entries: Vec<T> = a.entries.iter().zip(&b.entries).map(|(&x, &y)| x + y).collect();
    for k in packed_diagonal(a.dim) {
        entries[k] = a.entries[k] * b.entries[k];
    }
    Ok(CholPoint { dim: a.dim, entries })
}

/// Weighted Fréchet mean with weights `softmax(logits)`: arithmetic mean of
/// strict-lower parts, geometric mean of diagonals.
pub fn wfm<T: Scalar>(points: &[CholPoint<T>], logits: &[T]) -> Result<CholPoint<T>> {
    let first = points.first().ok_or(Error::Empty("wfm"))?;
    if logits.len() != points.len() {
        return Err(Error::DimMismatch(points.len(), logits.len()));
    }
    for p in points {
        first.check_dims(p)?;
    }
    let weights = softmax(logits);
    let diag = packed_diagonal(first.dim);
    let mut entries = vec![T::zero(); first.entries.len()];
    for (p, &w) in points.iter().zip(&weights) {
        for (k, e) in entries.iter_mut().enumerate() {
            *e += w * p.entries[k];
        }
    }
    // diagonal entries are overwritten with the geometric mean
    for &k in &diag {
        let mut s = T::zero();
        for (p, &w) in points.iter().zip(&weights) {
            s += w * p.entries[k].ln();
        }
        entries[k] = s.exp();
    }
    Ok(CholPoint {
        dim: first.dim,
        entries,
    })
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mx = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Zeroes the upper triangle and clamps the diagonal to `>= floor`.
pub fn project_to_chol<T: Scalar>(m: &Tensor<T>, floor: T) -> Result<CholPoint<T>> {
    if !m.is_square() {
        return Err(Error::InvalidArgument {
            op: "project_to_chol",
            msg: format!("not square: {:?}", m.shape()),
        });
    }
    if !(floor > T::zero()) {
        return Err(Error::InvalidArgument {
            op: "project_to_chol",
            msg: "floor must be positive".into(),
        });
    }
    let n = m.rows();
    let mut entries = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        for j in 0..=i {
            let v = m.at(i, j);
            entries.push(if i == j { v.max(floor) } else { v });
        }
    }
    Ok(CholPoint { dim: n, entries })
}

/// Frobenius norm of the log-coordinate difference.
pub fn chol_distance<T: Scalar>(a: &CholPoint<T>, b: &CholPoint<T>) -> Result<T> {
    a.check_dims(b)?;
    let (la, lb) = (chol_log(a)?, chol_log(b)?);
    Ok(la
        .entries
        .iter()
        .zip(&lb.entries)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt())
}
