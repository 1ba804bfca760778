//! A desk-scale semi-supervised learning lab.
//!
//! The crate implements nullspace tuning over partial-label equivalence
//! classes: unlabeled examples known to share a (hidden) label are pushed
//! towards identical predicted class distributions. It ships the pieces
//! needed to compare that penalty against the usual semi-supervised
//! baselines on synthetic data:
//!
//! - [`ndgrad`]: float64 tensors with reverse-mode differentiation.
//! - [`nnmodel`]: the MLP classifier, EMA teacher and parameter files.
//! - [`datagen`]: synthetic datasets, semi-supervised splits, equivalence
//!   classes, pair sampling and augmentation.
//! - [`ssl`]: every loss term (nullspace penalty, MixMatch, Π-model,
//!   Mean Teacher, pseudo-labels, VAT).
//! - [`trainer`]: Adam with decoupled weight decay, weight schedules and
//!   the per-method training loop.
//! - [`bench`]: sweeps, grid search, CSV persistence, SVG plots and PCA
//!   embeddings.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// `Var::add` and friends are fallible, so they cannot be the operator traits.
#![allow(clippy::should_implement_trait)]

pub mod bench;
pub mod datagen;
mod error;
pub mod ndgrad;
pub mod nnmodel;
pub mod rngs;
pub mod ssl;
pub mod trainer;

pub use error::{Error, Result};
