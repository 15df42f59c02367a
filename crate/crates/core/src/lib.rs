//! Hierarchical networks of oriented quasi quadrature measures over a
//! discrete Gaussian scale space, with mean-reduced texture descriptors,
//! classifiers and an executable covariance verification harness.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod classify;
pub mod covariance;
pub mod descriptor;
pub mod error;
pub mod image_io;
pub mod network;
pub mod quadrature;
pub mod scale_space;
pub mod synthetic;

pub use error::{Error, Result};
pub use image_io::Image;
