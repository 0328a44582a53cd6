// NaN must fail range checks, so several guards are written as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod backbone;
pub mod error;
pub mod experiment;
pub mod params;
pub mod registry;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
