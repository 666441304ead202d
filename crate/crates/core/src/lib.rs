#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod dss;
pub mod engine;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod ledger;
pub mod objective;
pub mod resnet;
pub mod rmtr;
pub mod tr;

pub use error::{Error, Result};
