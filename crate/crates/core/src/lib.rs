//! Data-to-equation engine: learns symbolic formulas from tabular data.
//!
//! The crate is organized as a pipeline:
//!
//! - [`expr`]: expression trees, the token vocabulary, and numeric evaluation.
//! - [`datagen`]: synthetic (X, y, formula) triplet corpora for pretraining.
//! - [`model`]: a small encoder-decoder policy over equation tokens, with its
//!   own reverse-mode differentiation, decoding strategies, and checkpoints.
//! - [`reel`]: reinforcement finetuning of a pretrained policy against one
//!   dataset, driven by a smoothed fit reward, a clipped importance-weighted
//!   surrogate, and a KL anchor to the pretrained policy.
//! - [`bench`]: dataset loading, train/test evaluation, noise robustness, and
//!   report emission.
//! - [`rng`]: named deterministic random streams; every run is reproducible
//!   from a single seed.

pub mod bench;
pub mod datagen;
pub mod expr;
pub mod model;
pub mod reel;
pub mod rng;

pub use bench::{Dataset, EvalOptions, Metrics, TimingPolicy};
pub use expr::{EvalResult, Expression, FailureReason, TokenSequence, Vocabulary};
pub use model::{DecodeMode, ModelConfig, PolicySnapshot};
pub use reel::{FinetuneConfig, ReelOutcome, StepDiagnostics};
