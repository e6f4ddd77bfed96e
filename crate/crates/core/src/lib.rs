//! chronovec: arithmetic on model checkpoints in weight space.
//!
//! A "time vector" is the difference between a model finetuned on data from
//! one time period and the pretrained model it started from. This crate
//! provides the container I/O, the vector algebra (interpolation, analogies,
//! soups, parameter-group swaps, LoRA merging), the statistical analyses that
//! relate weight-space geometry to temporal performance degradation, sweep
//! orchestration against an external evaluator, and a self-contained toy lab
//! with a tiny trainable language model for end-to-end experiments.

pub mod analysis;
pub mod parallel;
pub mod rng;
pub mod sweep;
pub mod tensorio;
pub mod toylab;
pub mod vecalg;

pub use tensorio::{Checkpoint, Dtype, Fingerprint, Tensor};
pub use vecalg::{ParamGroup, ParamGroupRules, TimePeriod, TimeVector};
