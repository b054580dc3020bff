//! Holds no code. The acceptance report lives in `tests/acceptance.rs`; run it with
//! `cargo test -p ecgx-acceptance -- --nocapture`.
