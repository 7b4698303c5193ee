//! Criterion benchmarks for the operators and the model; see `benches/operators.rs`.
