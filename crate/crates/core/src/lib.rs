pub mod accountant;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod dp;
pub mod env;
pub mod error;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod policy;

pub use error::{Error, FormatError, Result};
