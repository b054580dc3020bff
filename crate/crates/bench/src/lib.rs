//! Holds no code. Benchmarks live in `benches/`; run them with `cargo bench -p ecgx-bench`.
