//! Criterion benchmarks for `occfield`; see `benches/`.
