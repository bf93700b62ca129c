//! Criterion benchmarks for the encoder, propagation and a training step live in `benches/`.
