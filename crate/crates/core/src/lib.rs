//! Continual memorization lab.
//!
//! Trains a small decoder-only transformer on synthetic factoids over several
//! stages, applies forgetting mitigations (plain sequential training, replay of
//! earlier factoids, or mixing in unrelated random/generic text) and measures
//! what happens with exact-match accuracy, logit-lens probes and
//! gradient-alignment diagnostics.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the 64-bit instantiation used for training and diagnostics.

pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod model;
pub mod runner;
pub mod scalar;
pub mod seeding;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit model used for all training and diagnostic numerics.
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type ForwardTrace64 = model::ForwardTrace<f64>;
