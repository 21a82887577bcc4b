//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is exactly what small convolutional image models need:
//! convolutions, pointwise nonlinearities, channel attention primitives,
//! per-channel noise injection, fixed separable resampling and the usual
//! reductions used as losses. All kernels are single-threaded and
//! deterministic, so identical inputs give bit-identical outputs and
//! gradients.
//!
//! ```
//! use stochsr_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
//! let loss = g.mean_square_to(x, 0.0);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, -3.0]);
//! ```

mod error;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use params::{conv_weight, Adam, AdamConfig, Bound, NamedTensor, ParamId, ParamStore};
pub use tensor::Tensor;
