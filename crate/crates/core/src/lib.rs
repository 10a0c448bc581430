//! Federated training of small image classifiers with a Barlow Twins
//! model-contrastive local objective, optionally initialised from an encoder
//! pretrained on shared pseudo data with two pretext tasks (source-center
//! classification and patch-swap restoration).
//!
//! Everything runs on a minimal reverse-mode autodiff engine over `f64`
//! tensors ([`numerics`]), so every loss path can be checked against central
//! finite differences.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod fl;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod ssl;
pub mod synthdata;

pub use error::{Error, Result};
pub use numerics::{ParamSet, Tensor};
