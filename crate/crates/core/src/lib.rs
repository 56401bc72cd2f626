//! Few-shot image classification laboratory.
//!
//! Everything runs on a self-contained f64 reverse-mode autodiff core and a
//! procedurally generated, rotation-asymmetric image dataset:
//!
//! - [`graph`] / [`tensor`] / [`optim`]: the numerical substrate.
//! - [`dataset`] / [`augment`]: data generation, on-disk container, class
//!   splits, rotations, augmentations and robustness perturbations.
//! - [`model`]: the convolutional backbone with tappable layer boundaries,
//!   cosine classifier and rotation head.
//! - [`losses`]: classification, manifold-mixup, rotation and exemplar
//!   objectives plus the two-phase combination rule.
//! - [`pipeline`]: the two-phase training recipe with validation-driven
//!   early stopping.
//! - [`eval`]: episodic N-way K-shot evaluation, adversarial and corruption
//!   probes, gradient saliency, feature export.
//! - [`gradcheck`]: finite-difference verification of every gradient path.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
