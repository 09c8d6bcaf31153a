#![allow(dead_code)]

//! Test-only oracles shared by the integration suites.

pub mod gradcheck;
pub mod oracles;
