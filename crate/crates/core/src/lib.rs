// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod apl;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod params;
pub mod quadrature;
pub mod spd;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
