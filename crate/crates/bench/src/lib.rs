//! Criterion benchmarks for the estimation back end; see `benches/`.
