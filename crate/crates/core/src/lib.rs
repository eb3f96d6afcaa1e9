#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod bagdata;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pyramid;
pub mod seed;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
