//! Stack neural module networks.
//!
//! A learned controller reads a question (or referring expression) and, at
//! every step, spreads a probability mass over a small library of neural
//! modules. All modules run on a differentiable stack of attention maps and
//! their resulting stacks are averaged by that mass, so the whole program
//! execution is trained end to end with back-propagation.
//!
//! Crate map:
//!
//! * [`tensor`]: reverse-mode differentiation, LSTM, Adam, checkpoints.
//! * [`stack`]: the differentiable LIFO memory of attention maps.
//! * [`controller`]: question encoder and per-step module/text attention.
//! * [`modules`]: the nine neural modules.
//! * [`executor`]: soft (and discretized) program execution, plus the
//!   symbolic reference interpreter.
//! * [`gridworld`]: synthetic scenes, questions and referring expressions.
//! * [`training`]: losses, the optimization loop and metrics.
//! * [`trace`]: per-step interpretability traces and heatmaps.

pub mod config;
pub mod controller;
pub mod error;
pub mod executor;
pub mod gradcheck;
pub mod gridworld;
pub mod model;
pub mod modules;
pub mod stack;
pub mod tensor;
pub mod trace;
pub mod training;

pub use error::{Error, Result};
