// Negated comparisons reject NaN on purpose, the `Var` arithmetic methods
// return `Result` so they cannot be the std operator traits, and numeric
// loops index several arrays in step.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::needless_range_loop
)]

pub mod data;
pub mod distributions;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
