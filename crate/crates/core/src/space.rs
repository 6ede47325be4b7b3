//! Geometry operations recorded on the tape.
//!
//! Points are dense `Q x Q` lower-triangular nodes. [`Space::Manifold`] uses
//! the Cholesky-space maps from [`crate::geometry`]; [`Space::Euclidean`]
//! swaps every map for its flat analogue (identity log/exp, addition,
//! arithmetic mean) and is used by the ablation runs.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{self, CholPoint};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, UnaryKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Manifold,
    Euclidean,
}

/// Dimension-dependent index tables, built once per model.
#[derive(Debug, Clone)]
pub struct TriLayout {
    pub dim: usize,
    pub lower: Rc<[usize]>,
}

impl TriLayout {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            lower: geometry::lower_indices(dim),
        }
    }

    /// `Q(Q+1)/2`.
    pub fn packed_len(&self) -> usize {
        self.lower.len()
    }
}

impl Space {
    /// Identity element of the group: `I` on the manifold, `0` when flat.
    pub fn origin<T: Scalar>(self, dim: usize) -> Tensor<T> {
        match self {
            Space::Manifold => Tensor::identity(dim),
            Space::Euclidean => Tensor::zeros(&[dim, dim]),
        }
    }

    pub fn log<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Space::Manifold => tape.tri_map(x, None, Some(UnaryKind::Log)),
            Space::Euclidean => Ok(x),
        }
    }

    pub fn exp<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Space::Manifold => tape.tri_map(x, None, Some(UnaryKind::Exp)),
            Space::Euclidean => Ok(x),
        }
    }

    pub fn group<T: Scalar>(self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        match self {
            Space::Manifold => tape.chol_group(a, b),
            Space::Euclidean => tape.add(a, b),
        }
    }

    /// Weighted Fréchet mean of two points with weights `softmax(logits)`;
    /// `logits` is a `1 x 2` node.
    pub fn wfm2<T: Scalar>(self, tape: &mut Tape<T>, a: Var, b: Var, logits: Var) -> Result<Var> {
        let w = tape.softmax_rows(logits)?;
        let w0 = tape.gather(w, Rc::from([0usize]))?;
        let w1 = tape.gather(w, Rc::from([1usize]))?;
        let la = self.log(tape, a)?;
        let lb = self.log(tape, b)?;
        let sa = tape.mul_scalar(la, w0)?;
        let sb = tape.mul_scalar(lb, w1)?;
        let mean = tape.add(sa, sb)?;
        self.exp(tape, mean)
    }

    /// Packed log-coordinates as a `P x 1` column.
    pub fn vectorize<T: Scalar>(self, tape: &mut Tape<T>, x: Var, layout: &TriLayout) -> Result<Var> {
        let l = self.log(tape, x)?;
        tape.gather(l, layout.lower.clone())
    }

    /// Inverse of [`Space::vectorize`].
    pub fn unvectorize<T: Scalar>(self, tape: &mut Tape<T>, v: Var, layout: &TriLayout) -> Result<Var> {
        let m = tape.scatter(v, layout.lower.clone(), &[layout.dim, layout.dim])?;
        self.exp(tape, m)
    }
}

/// Reads a point node back into a validated [`CholPoint`].
pub fn read_point<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<CholPoint<T>> {
    CholPoint::from_tensor(tape.value(v))
}
