//! Criterion benchmarks for the `expertmix` engine; see `benches/`.
