//! Weighted pairwise composite likelihood for linear mixed models fitted to
//! data from complex probability samples.

pub mod cli;
pub mod data;
pub mod design;
pub mod error;
pub mod fit;
pub mod inference;
pub mod optimizer;
pub mod pairobj;
pub mod simlab;
pub mod varstruct;

pub use error::{Error, Result};
