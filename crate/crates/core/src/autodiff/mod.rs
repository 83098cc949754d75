//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors, with support for differentiating through gradients.
//!
//! ```
//! use ptm_distill::autodiff::{grad, Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(&Tensor::vector(&[1.0, 2.0]));
//! let cube = x.mul(&x).unwrap().mul(&x).unwrap().sum().unwrap();
//! // first derivative 3x², kept differentiable
//! let dx = grad(&cube, &[&x], true).unwrap().remove(0);
//! let hvp = grad(&dx.sum().unwrap(), &[&x], false).unwrap().remove(0);
//! assert_eq!(hvp.data(), &[6.0, 12.0]);
//! ```

mod graph;
pub mod kernels;
mod ops;
mod tensor;

pub use graph::{grad, Graph, NO_SOURCE};
pub use tensor::Tensor;
