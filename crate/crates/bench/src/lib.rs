//! Benchmarks for the inference engine live in `benches/`.

pub use ffgvi_core::*;
