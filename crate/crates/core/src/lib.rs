#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cli;
pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod par;
pub mod training;

pub use error::{Error, Result};
