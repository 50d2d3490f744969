//! Numerical core for renormalized feature connections.
//!
//! * [`tensor`] / [`autodiff`]: dense `f64` tensors and a reverse-mode tape
//!   covering convolution, bilinear resize, channel max, softmax, activations
//!   and the detection losses.
//! * [`algebra`]: feature bases over a cascade and the factor ↔ strength map.
//! * [`kdn`]: per-image salience statistics, factor stacks and fusion.
//! * [`connections`]: economical, complete and variant connections for
//!   pyramid detectors.

pub mod algebra;
pub mod autodiff;
pub mod connections;
pub mod error;
pub mod gradcheck;
pub mod kdn;
mod kernels;
pub mod linalg;
pub mod tensor;

pub use algebra::{Factors, FeatureCascade, Strengths};
pub use autodiff::{Graph, Var};
pub use error::{AlgebraError, ConnectionError, KdnError, TensorError};
pub use tensor::Tensor;
