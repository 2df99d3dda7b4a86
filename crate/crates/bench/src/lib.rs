//! Criterion benchmarks for the analysis kernels; see `benches/`.
