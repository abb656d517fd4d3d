//! Shared oracles, generators and checks for the integration tests.
#![allow(dead_code)]

pub mod brute;
pub mod checks;
pub mod gen;
pub mod precise;

/// A check's summary line on success, or the first violation found.
pub type Check = Result<String, String>;
