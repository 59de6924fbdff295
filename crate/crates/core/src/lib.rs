// Validation uses `!(x > 0.0)` so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mim;
pub mod optim;
pub mod rope;
pub mod synth;
pub mod teacher;
pub mod tensor;
pub mod train;
