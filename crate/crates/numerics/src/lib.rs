//! Numerical substrate: dense tensors, tape-based reverse-mode autodiff,
//! Adam, finite-difference checks and the binary array container used for
//! checkpoints and dataset blobs.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`).
//!
//! ```
//! use svla_numerics::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input(Tensor::scalar(3.0), true);
//! let y = g.mul(x, x);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod opcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use error::NumericsError;
pub use gradcheck::{finite_diff_check, finite_diff_check_params, ParamCheck};
pub use graph::{ConvSpec, Gradients, Graph, Var};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, OptimState};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
