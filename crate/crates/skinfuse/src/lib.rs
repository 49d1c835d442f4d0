//! Two-branch skin-lesion classification with attention-based feature
//! fusion, built for exact reproducibility on a single CPU core.
//!
//! A clinical photograph and a dermoscopic image of the same lesion pass
//! through two convolutional backbones — either identical twins or a
//! deliberately lightweight clinical branch next to a heavier dermoscopic
//! one — while attention blocks exchange information between the feature
//! maps at chosen stages. Three classifier branches (clinical, dermoscopic,
//! fused) each predict all eight diagnostic tasks; their softmax outputs
//! are blended by a weighted average whose weights come from a grid search
//! on the validation split.
//!
//! Everything is deterministic: all randomness derives from one seed via
//! named streams, tensors are plain `f64`, and artifacts (datasets,
//! checkpoints, prediction dumps) round-trip bit-exactly.
//!
//! Module map:
//! - [`tensor`]: channels-last tensors and the reverse-mode autodiff graph.
//! - [`layers`], [`blocks`]: convolution/linear layers and the attention
//!   fusion blocks built from them.
//! - [`model`]: backbone + fusion assembly, parameter audits, checkpoints.
//! - [`data`]: the label schema, dataset layout, and synthetic generator.
//! - [`train`]: augmentation, the three-branch loss, Adam, weight averaging.
//! - [`eval`]: prediction fusion, metrics, weight search, report tables.

pub mod blocks;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
