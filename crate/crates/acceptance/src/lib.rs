//! Acceptance checks for `ivcore`, kept in their own package so that they run
//! after the library's own test targets. See `tests/acceptance.rs`.
