//! Benchmarks for the prompt search engine live in `benches/`.
