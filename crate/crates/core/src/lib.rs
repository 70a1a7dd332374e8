//! Multi-modal prompt learning on a small frozen dual-encoder model.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: a minimal reverse-mode engine and
//!   its finite-difference oracle.
//! - [`model`]: vision/text transformer encoders, projections, zero-shot
//!   classification and the contrastive pretraining loss.
//! - [`prompts`]: prompt banks, per-layer injection and the language-to-vision
//!   coupling maps for every prompting variant.
//! - [`data`]: procedural image/caption corpora, splits and domain shifts.
//! - [`train`], [`checkpoint`]: pretraining, frozen-backbone prompt tuning,
//!   binary checkpoints.
//! - [`eval`], [`flops`], [`embed`]: benchmark protocols, sweeps, analytic
//!   FLOP accounting and embedding export.
//! - [`config`]: flat `key = value` run configuration used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flops;
pub mod graph;
pub mod model;
pub mod prompts;
pub mod gradcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
