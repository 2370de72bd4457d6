#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapter;
pub mod attack;
pub mod dpcore;
pub mod error;
pub mod oracle;
pub mod persample;
pub mod tensor;
pub mod trainer;
pub mod ttcore;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
