//! Test-only package. The acceptance suite lives in `tests/acceptance.rs`
//! and the real-checkpoint checks in `tests/real_encoders.rs`.
