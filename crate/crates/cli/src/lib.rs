//! Scenario files, artifact output and the acceptance suite behind the `sgi`
//! command-line tool.

// `!(x > y)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod execute;
pub mod output;
pub mod scenario;
pub mod selftest;
pub mod units;
