//! Criterion benchmarks for the emodur kernels; see `benches/`.
