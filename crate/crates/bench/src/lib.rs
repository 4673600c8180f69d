//! Criterion benchmarks for the hot paths of `kerrvapor-core`; see `benches/`.
