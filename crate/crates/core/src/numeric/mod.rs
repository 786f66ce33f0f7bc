//! Deterministic `f64` tensors, a seeded RNG, and a reverse-mode tape.

mod graph;
mod kernels;
mod rng;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, ParamId, ParamStore, Parameter, Var};
pub use kernels::{cosine, log_sum_exp, sigmoid, softmax, swish, top_k, COSINE_EPS};
pub use rng::Rng;
pub use tensor::Tensor;

pub(crate) use tensor::dot;
