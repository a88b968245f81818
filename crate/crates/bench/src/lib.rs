//! Criterion benchmarks for `idkit-core`; the benches live under `benches/`.
