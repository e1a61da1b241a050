//! Criterion benchmarks for the hot kernels and a full training step; see
//! `benches/kernels.rs`.
