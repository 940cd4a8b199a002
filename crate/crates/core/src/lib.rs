//! Downstream speech-emotion-recognition head over precomputed upstream features.
//!
//! Everything here is `no_std` + `alloc`: a small reverse-mode autodiff engine,
//! layer aggregation and temporal pooling, gender/text conditioning, weighted
//! cross-entropy and F1 metrics, an AdamW trainer, and COBYLA-based prediction
//! fusion. File formats and the command-line tool live in the `emohead` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod cobyla;
pub mod conditioning;
pub mod error;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pooling;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_diff_check, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
