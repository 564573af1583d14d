//! Multimodal process-to-result consistency anomaly detection.
//!
//! This crate trains a consistency model over synchronized production
//! modalities: a sensor time-series governs (via a selective state-space
//! encoder and feature-wise affine modulation) how video and audio features
//! are fused into a process latent, a decoder predicts the post-production
//! result latent from the process side only, and anomalies are scored as
//! violations of that process-to-result mapping. Everything runs on a
//! self-contained tensor/autodiff substrate so the whole pipeline is
//! gradient-checkable end to end.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `procres` CLI; the main entry points are:
//!
//! - [`autodiff`]: static computation graphs with reverse-mode gradients
//! - [`data`]: tensor file format, synthetic dataset generator, defect
//!   injection, sensor corruptions
//! - [`model`]: the modulation / encoding / decoding / scoring pipeline
//! - [`harness`]: training loop, evaluation metrics, ablations, benchmarks

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod imageops;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{AnyTensor, Dtype, Element, Tensor};
