//! Normalization-guided augmentation for domain generalization.
//!
//! A small reverse-mode tensor engine drives a two-path network: the main
//! path normalizes the whole multi-domain batch, while the auxiliary path
//! splits the batch into domain sub-batches and normalizes each with its own
//! unit from a BN bank, routing it to a matching classifier. At test time the
//! main prediction is fused with the single-domain sub-paths.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the CLI and the
//! acceptance suite use.

pub mod autodiff;
pub mod datagen;
pub mod diagnostics;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod kv;
pub mod model;
pub mod normbank;
pub mod rng;
pub mod training;
mod error;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type BNUnit = normbank::BNUnit<f64>;
pub type ONUnit = normbank::ONUnit<f64>;
pub type BNBank = normbank::BNBank<f64>;
pub type Model = model::Model<f64>;
pub type Dataset = datagen::Dataset<f64>;
