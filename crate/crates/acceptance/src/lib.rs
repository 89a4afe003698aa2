//! Holds the acceptance run in `tests/acceptance.rs`, a plain binary
//! test target: `cargo test -p panodr-acceptance`.
