//! Holds the workspace acceptance suite in `tests/acceptance.rs`; the crate
//! itself is empty.
