//! Distillation-guided layer dropping for dynamic-depth CTC encoders.
//!
//! A full-depth reference encoder is trained with CTC, then a student whose
//! blocks are Bernoulli-gated residuals is finetuned against CTC plus a
//! frame-wise KL term toward the frozen reference. The student can then run
//! at any depth, and [`eval::depth_sweep`] reports the error/compute curve.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub mod cli;
mod codec;

pub use error::{DldError, Result};
pub use tensor::{Tape, Tensor, Var};
