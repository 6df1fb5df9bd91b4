//! Desk-scale laboratory for tri-matrix low-rank adaptation (TLoRA) of a
//! small transformer encoder, with a LoRA baseline for comparison.
//!
//! The crate provides:
//!
//! - [`tensor`]: a dense f64 tensor type and a reverse-mode autodiff tape,
//!   plus a finite-difference gradient checker.
//! - [`model`]: a frozen toy transformer encoder whose attention projections
//!   act as adaptation sites.
//! - [`adapters`]: TLoRA (`ΔW = α·A·B·C`, fixed random `A`/`C`, trainable
//!   `B` and `α`) and LoRA adapter layers, plus exact parameter accounting.
//! - [`train`]: AdamW with a linear learning-rate schedule, deterministic
//!   seeded training, and per-epoch metric snapshots.
//! - [`analysis`]: weight histograms, norm/scaling timelines, layer heatmaps,
//!   a Jacobi eigensolver for update spectra, and cosine-similarity reports.
//! - [`data`]: a synthetic marker-matching sentence-pair task and a TSV
//!   loader with a minimal whitespace tokenizer.
//! - [`rundir`]: the on-disk run-directory layout (config manifest, metrics
//!   CSV, flat little-endian f64 weight files).

pub mod adapters;
pub mod analysis;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod rundir;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tape, Mode, NodeId};
