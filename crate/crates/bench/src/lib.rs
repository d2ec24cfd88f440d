//! Criterion benchmarks for the IEMF core kernels; see `benches/`.
