//! Functional-entropy-based modality diagnostics and adaptive activation
//! steering on a small trainable multimodal transformer.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense tensors plus a tape-based reverse-mode autodiff engine
//! - [`model`]: the toy multimodal decoder with a KV cache and steering hook
//! - [`diagnostics`]: modality-contribution scores from perturbation
//!   sensitivity, plus functional-entropy Monte Carlo estimators
//! - [`steering`]: adaptive intensity scaling and the learned steerer MLP
//! - [`conflict`]: the synthetic visual-vs-text conflict task and evaluator
//! - [`config`], [`report`], [`cli`]: experiment plumbing

pub mod cli;
pub mod config;
pub mod conflict;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod report;
pub mod seed;
pub mod steering;
pub mod tensor;

pub use error::{AmpsError, Result};
