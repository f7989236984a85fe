//! Small f64-only autodiff engine.
//!
//! Built for models that must pass finite-difference gradient checks and
//! reproduce bit-identically across runs: all math is f64, single-threaded,
//! and free of iteration-order hazards. GEMM-heavy ops (linear, batched
//! matmul, im2col convolution) ride on `matrixmultiply`.

mod graph;
mod kernels;
mod optim;
mod param;
mod tensor;

pub use graph::{Graph, NodeId};
pub use kernels::ConvDims;
pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
