//! Morphing-attack detection by distilling a convolutional teacher into a
//! low-rank-adapted vision transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor_nn`]: dense tensors, a small reverse-mode tape, numeric
//!   primitives, checkpoints and the finite-difference gradient checker.
//! - [`vit_lora`], [`teacher_cnn`], [`adapter`]: the three networks.
//! - [`distill`]: losses, learning-rate schedule, optimizer and the two
//!   training stages.
//! - [`data_synth`]: the procedural bona fide / morph generator and the
//!   three-way subject-disjoint protocol.
//! - [`metrics`]: MACER / BPCER / D-EER and DET curves.
//! - [`explain_lime`]: grid-perturbation local surrogate explanations.

pub mod adapter;
pub mod data_synth;
pub mod distill;
pub mod error;
pub mod explain_lime;
pub mod metrics;
pub mod teacher_cnn;
pub mod tensor_nn;
pub mod vit_lora;

pub use error::{Error, Result};
