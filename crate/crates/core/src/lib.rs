//! Model compression engine: a small computation-graph IR, a deterministic
//! reference executor, FP16/INT8 compression passes, binary-classification
//! metrics and a benchmark harness.

pub mod bench;
pub mod eval;
pub mod exec;
pub mod ir;
pub mod quant;
