//! Continuous-time disease progression modelling on the space of Cholesky
//! factors.
//!
//! Each visit (a feature vector or a 3-D volume, plus clinical scores) is
//! encoded into a lower-triangular matrix with positive diagonal. A hidden
//! point of the same kind is carried between visits by a neural ODE and
//! updated at each visit by an attention-gated recurrent cell. The decoder
//! reads class probabilities and normalized scores from its log-coordinates.
//!
//! Everything differentiable is built on [`tape::Tape`], a small
//! tensor-level reverse-mode tape. Numeric code is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below fix the type.
//!
//! ```
//! use rtnag::{CholPoint64, geometry};
//!
//! let a = CholPoint64::from_packed(vec![2.0, 1.0, 3.0]).unwrap();
//! let b = CholPoint64::from_packed(vec![4.0, 2.0, 5.0]).unwrap();
//! let g = geometry::group_op(&a, &b).unwrap();
//! assert_eq!(g.packed(), &[8.0, 3.0, 15.0]);
//! ```

pub mod argru;
pub mod cohort;
pub mod dataset;
pub mod error;
pub mod extractor;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ode;
pub mod params;
pub mod rmm;
pub mod scalar;
pub mod space;
pub mod tape;
pub mod tensor;
pub mod tnode;

pub use error::{Error, Result};
pub use geometry::{CholPoint, TangentVec};
pub use model::{Ablation, Model, ModelConfig, Sample};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type CholPoint64 = CholPoint<f64>;
pub type CholPoint32 = CholPoint<f32>;
pub type TangentVec64 = TangentVec<f64>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
