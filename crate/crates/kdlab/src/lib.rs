//! Two-stage, multi-level knowledge distillation for small transformer
//! encoders, exercised end to end on synthetic sequence tasks.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] - a minimal f64 tensor type with reverse-mode
//!   differentiation over an implicitly recorded compute graph.
//! * [`model`] - a deterministic post-norm transformer encoder with a
//!   sequence- or token-level classifier head, plus checkpointing.
//! * [`distill`] - the six distillation losses, the uniform layer map and
//!   the attention-split mechanism that lets a student with fewer heads
//!   learn from a teacher with more.
//! * [`oracle`] - independent brute-force reference implementations of the
//!   losses used to cross-check the differentiable versions.
//! * [`optim`] - Adam and SGD over tensor parameters.
//! * [`pipeline`] - synthetic planted-rule tasks, teacher training, the
//!   two-stage distillation loop, ablations and an inference benchmark.
//! * [`cli`] - flat-key TOML experiment configs and the run dispatcher
//!   behind the `kdlab` binary.

pub mod numerics;
pub mod oracle;

pub mod model;

pub mod distill;
pub mod optim;

pub mod pipeline;

pub mod cli;
