//! Dense `f32` tensors with define-by-run reverse-mode differentiation.
//!
//! Values are recorded on a [`Graph`] as operations run; [`Graph::backward`]
//! walks the tape in reverse and returns [`Gradients`] for leaves and
//! parameters. Trainable state lives in a [`ParamStore`] and is updated by an
//! [`Optimizer`].
//!
//! Heavy kernels split their work into fixed chunks through [`par`]; with the
//! `parallel` feature the chunks run on rayon, otherwise sequentially. Both
//! paths produce bit-identical results.

pub mod checkpoint;
mod error;
pub mod gemm;
pub mod gradcheck;
mod graph;
pub mod ops;
mod optim;
pub mod par;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Backward, BackwardCtx, Gradients, Graph, InputGrads, Var};
pub use ops::{stripe_bounds, NormMode};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{EntryKind, ParamId, ParamKey, ParamStore};
pub use tensor::Tensor;
