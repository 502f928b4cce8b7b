//! A small differentiable tensor-expression engine.
//!
//! Expressions are recorded into a [`Graph`] of primitive operations over
//! 64-bit [`Tensor`]s. [`Graph::grad`] appends the reverse pass as ordinary
//! nodes, which makes second-order quantities (for instance the gradient of
//! an input-gradient norm with respect to parameters) available by calling
//! it twice.
//!
//! ```
//! use covflow_autodiff::{Bindings, Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf("x", &[2]);
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum_all(sq).unwrap();
//! let value = Tensor::from_vec(vec![1.0, -2.0]);
//! let mut b = Bindings::new();
//! b.bind(x, &value);
//! let grads = g.gradient(y, &[x], &b).unwrap();
//! assert_eq!(grads[&x].data(), &[2.0, -4.0]);
//! ```

mod error;
mod eval;
mod grad;
mod graph;
pub mod kernels;
mod tensor;

pub use error::AdError;
pub use eval::{Bindings, EvalOptions};
pub use graph::{Graph, Node, NodeId, Op};
pub use tensor::Tensor;

#[cfg(feature = "testing")]
pub mod testing;
