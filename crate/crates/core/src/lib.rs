// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod cli;
mod csvout;
pub mod dataops;
pub mod error;
pub mod flow;
pub mod foe;
pub mod imgcore;
pub mod model;
pub mod spectral;
pub mod stopping;
pub mod synth;
pub mod train;
pub mod tvl2;

pub use error::{Error, Result};
