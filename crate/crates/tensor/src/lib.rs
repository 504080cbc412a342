//! Dense tensors, numeric kernels and a recording autodiff graph.
//!
//! Tensors are generic over [`Element`] (`f32` or `f64`); `f32` is the default.

mod element;
mod error;
mod gradcheck;
mod graph;
pub mod io;
pub mod kernels;
mod profile;
mod rng;
mod shape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use graph::{BnMode, BnVars, Graph, RunningUpdate, Var};
pub use kernels::Conv2dParams;
pub use profile::{OpCategory, OpKind, OpProfile, OpStat};
pub use rng::Rng;
pub use shape::{broadcast_shapes, Shape};
pub use tensor::{Fill, Tensor};
