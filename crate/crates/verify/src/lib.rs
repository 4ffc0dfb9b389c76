//! Reference implementations written apart from the production code paths.
//! The acceptance harness compares the real modules against them.

pub mod mux;
pub mod trace;
pub mod toy;
