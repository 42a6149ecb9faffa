//! Dense tensors, a reverse-mode tape, AdamW and the checkpoint container.

pub mod checkpoint;
mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use kernels::{axpy, dot};
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use tape::{GradBuf, Gradients, ParamGrads, ParamId, SparseRows, Tape, Var, STANDARDIZE_EPS};
pub use tensor::{Real, Tensor};
