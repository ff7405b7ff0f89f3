//! Desk-scale testbed for numerical bisection experiments with neural networks.
//!
//! The crate covers the full loop: procedural synthesis of circle stimuli with
//! area/perimeter confound controls ([`stimgen`]), a minimal dense-array kernel
//! with reverse-mode differentiation ([`tensornet`]), three small classifier
//! families spanning different inductive biases ([`models`]), the bisection
//! training protocol ([`harness`]), psychometric-curve analysis
//! ([`psychometrics`]), pairwise discriminability statistics ([`stats`]), and
//! embedding projection ([`embed`]).
//!
//! Numeric kernels are generic over the scalar type via [`scalar::Scalar`];
//! the experiment pipeline runs on the `f64` aliases exported below.

pub mod embed;
pub mod harness;
pub mod models;
pub mod psychometrics;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod stimgen;
pub mod tensornet;

pub use scalar::Scalar;

/// Dense tensor over `f64`, the pipeline's working precision.
pub type Tensor = tensornet::Tensor<f64>;
/// Differentiation graph over `f64`.
pub type Graph = tensornet::Graph<f64>;
/// Named parameter collection over `f64`.
pub type ParameterSet = tensornet::ParameterSet<f64>;
/// Optimizer state over `f64`.
pub type OptimizerState = tensornet::OptimizerState<f64>;
/// Classifier network over `f64`.
pub type Network = models::Network<f64>;
