//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod brute;
pub mod gradcheck;
pub mod metric_oracle;
