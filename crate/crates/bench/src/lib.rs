//! Criterion benchmarks for the training and control kernels; see `benches/`.
