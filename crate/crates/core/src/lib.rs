//! Imbalance-aware multi-rate activity recognition: a small reverse-mode
//! autodiff engine, multi-rate feature fusion, an ETF-calibrated classifier
//! head, class-balanced focal loss and the training/evaluation harness.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod mfc;
pub mod model;
pub mod nc3;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train_eval;

pub use error::{Error, Result};
pub use tensor::Tensor;
