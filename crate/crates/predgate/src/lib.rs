//! Predictive-coding video prediction built on a reduced-gate convolutional
//! LSTM, with a zoo of twenty gate-ablation cell variants, a from-scratch
//! reverse-mode autodiff tape, deterministic synthetic data, and a CLI for
//! training, evaluation, auditing, and gradient verification.

#![forbid(unsafe_code)]

pub mod autodiff;
pub mod cells;
pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod stack;
pub mod trainer;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Activation, ImageTensor, KernelStack};
