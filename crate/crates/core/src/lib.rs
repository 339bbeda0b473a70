//! Zero-gated prompt adapters for a SAM-style promptable segmenter.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`params`], [`optim`], [`gradcheck`],
//!   [`checkpoint`]: dense tensors, a reverse-mode tape, the named parameter
//!   registry, AdamW and the `SDCK` checkpoint format.
//! * [`model`]: a small promptable segmenter (patch-embedding encoder, point
//!   prompt encoder, two-way mask decoder, IoU head).
//! * [`adapter`]: zero-gated attention adapters for decoder or encoder, LoRA,
//!   and per-method freeze policies.
//! * [`losses`]: supervised and test-time objectives plus the IoU metric.
//! * [`data`]: deterministic synthetic domains and the `SDIM` sample format.
//! * [`engine`]: training, evaluation, test-time adaptation, statistics,
//!   ablations and reports.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
