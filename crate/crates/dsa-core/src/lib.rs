//! Debiased self-attention (DSA) pipeline for a desk-scale vision transformer.
//!
//! The crate is organised as a pipeline:
//!
//! 1. [`datagen`] builds a synthetic shortcut-learning benchmark where a
//!    sensitive cue (a tinted corner patch) correlates with the target label.
//! 2. [`biasonly`] trains a biased twin of the classifier whose auxiliary
//!    head predicts the sensitive attribute while target accuracy is
//!    adversarially suppressed.
//! 3. [`attack`] uses attention rollups of the biased model to locate the
//!    patches carrying the sensitive signal and crafts per-example
//!    perturbations that erase it.
//! 4. [`align`] defines attention-map distances between clean and attacked
//!    inputs; [`trainer`] minimises task loss plus that alignment term.
//! 5. [`fairmetrics`] scores the result (accuracy and group fairness gaps).
//!
//! Everything runs on [`tensor`], a reverse-mode tape over dense `f64`
//! buffers; no GPU or external ML runtime is involved.

pub mod align;
pub mod attack;
pub mod biasonly;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod fairmetrics;
pub mod heatmap;
pub mod manifest;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{DsaError, Result};
