//! File formats, rendering and the command-line front end for
//! [`boxlabel_core`].

pub mod cli;
pub mod dataio;
pub mod error;
pub mod metadata;
pub mod palette;
pub mod render;

pub use error::{AppError, Result};
