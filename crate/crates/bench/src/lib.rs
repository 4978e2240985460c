//! Criterion benchmarks for `tqt-core` live under `benches/`.
