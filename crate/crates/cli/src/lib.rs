//! Library side of the `mopoe` command: configuration, dataset
//! directories, metrics files and the subcommands.

// Negated comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod dataset;
pub mod metrics;
