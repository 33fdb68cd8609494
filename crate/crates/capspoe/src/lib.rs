//! File formats, configuration and the pipeline commands for
//! [`capspoe_core`].

pub mod config;
mod error;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
