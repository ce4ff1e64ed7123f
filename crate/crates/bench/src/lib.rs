//! Criterion benchmarks for the simulator's hot paths; see `benches/`.
