// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
pub mod augment;
pub mod config;
pub mod curation;
pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;
