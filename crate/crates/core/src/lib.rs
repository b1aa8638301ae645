//! A self-contained convolutional neural network engine for stained-cell
//! image classification.
//!
//! The pipeline runs end to end on the CPU with no external ML dependencies:
//! grayscale preprocessing and rotation augmentation ([`imageproc`]), an
//! eight-layer convolutional network with exact analytic gradients
//! ([`network`] on top of [`numerics`]), mini-batch SGD with momentum and
//! weight decay ([`trainer`]), rotation-averaged snapshot-ensemble prediction
//! ([`inference`]), and confusion-matrix/MCA/ACA reporting ([`metrics`]).
//! [`dataset`] handles manifest-driven corpora, the split protocol, and a
//! synthetic corpus generator for desk-scale verification.

pub mod dataset;
pub mod error;
pub mod imageproc;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
