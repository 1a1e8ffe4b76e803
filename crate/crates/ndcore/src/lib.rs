//! Small dense-tensor numerics core: row-major `f64` tensors, a dynamic
//! autodiff tape, AdamW with a warmup-stable-decay schedule, and
//! counter-addressable random streams.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod rng;
mod tensor;

pub use error::{NdError, Result};
pub use gradcheck::{grad_check, grad_check_many, grad_check_params};
pub use graph::{Graph, Unary, Var};
pub use optim::{AdamW, AdamWConfig, WsdSchedule};
pub use params::{Grads, ParamEntry, ParamId, ParamStore};
pub use rng::RngStream;
pub use tensor::Tensor;
