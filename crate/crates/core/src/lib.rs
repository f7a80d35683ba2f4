pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod gate;
pub mod model;
pub mod params;
pub mod slot;
pub mod template;
pub mod train;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};
