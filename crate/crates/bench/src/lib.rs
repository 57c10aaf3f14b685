//! Criterion benchmarks for the localization pipeline live in `benches/`.
