//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Graphs are built dynamically per evaluation and are single-threaded.
//! −∞ is the canonical log-zero and every log-space primitive tolerates it.

mod gradcheck;
mod params;
mod tensor;
mod value;

pub use gradcheck::gradcheck;
pub use params::{accumulate, Adam, Bound, ParamId, ParamSet};
pub use tensor::Tensor;
#[allow(unused_imports)]
pub(crate) use tensor::gemm;
pub use value::{logsumexp_slice, Value};
