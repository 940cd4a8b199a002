//! Files, synthetic data and the command-line front end for [`emohead_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod outputs;
pub mod synthetic;
pub mod tensor_file;

pub use error::{Error, Result};
