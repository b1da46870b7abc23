//! Desk-scale laboratory for adversarially robust mixture prompt tuning.
//!
//! Frozen synthetic image/text encoders stand in for a pretrained
//! vision-language backbone; the learnable state is a bank of text-prompt
//! contexts plus a conditional weight router that mixes their encoded
//! features per image. Training alternates projected-gradient attacks on
//! the images with plain gradient descent on the prompts and router, and
//! the eval harness reproduces the benchmark sweeps at toy scale.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod prompts;
pub mod seeding;
pub mod synth;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
