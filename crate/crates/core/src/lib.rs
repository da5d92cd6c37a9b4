//! Multi-layered parallel graph convolutional networks.
//!
//! Subjects are nodes of several population graphs, one per metadata element.
//! Each graph drives its own two-layer graph-convolution branch over shared
//! features, and a trainable ranking layer fuses the branch logits with one
//! scalar weight per graph. The learned weights rank the metadata elements by
//! how useful their neighborhoods are for the prediction task.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which the gradient checks require.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = tensor::DenseMatrix<f64>;
pub type SparseMatrix = tensor::SparseSymMatrix<f64>;
pub type Graph = graph::AffinityGraph<f64>;
pub type Params = model::ModelParams<f64>;
pub type Dataset = data::Dataset<f64>;
