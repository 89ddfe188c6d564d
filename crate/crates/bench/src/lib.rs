//! Criterion benchmarks for dancegen live in `benches/`.
