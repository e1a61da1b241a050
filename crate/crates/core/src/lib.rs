//! Desk-scale object-detection laboratory: a small reverse-mode autodiff
//! engine, a configurable detector zoo, partition-aware training regimes
//! (scratch, fine-tune, frozen backbone, frozen backbone with residual
//! adapters), synthetic data, COCO-style evaluation and cost accounting.

// `!(x > 0.0)` is the idiom for "not a positive number", NaN included.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
