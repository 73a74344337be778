// SPDX-License-Identifier: MIT OR Apache-2.0

//! # actpatch-core
//!
//! Allocation-only (`no_std` + `alloc`) engine for activation patching on
//! GPT-2-family decoder models.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernels`]: dense `f32` primitives with fixed reduction order.
//! - [`tokenizer`]: GPT-2 byte-level BPE and labelled token spans.
//! - [`model`]: pre-layernorm forward pass with interceptable hook sites.
//! - [`intervention`]: activation caches, patch specifications and the
//!   clean / corrupted / patched run triple.
//! - [`corruption`]: Gaussian noising, symmetric token replacement and
//!   fully random name replacement.
//! - [`metrics`]: patching-effect metrics, effect matrices and the
//!   two-standard-deviation detection rule.
//! - [`tasks`]: prompt generators for IOI, factual recall, greater-than,
//!   docstring and arithmetic settings.
//!
//! File formats, experiment orchestration and the CLI live in the `actpatch`
//! companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corruption;
pub mod error;
pub mod intervention;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod tasks;
pub mod tokenizer;

mod math;

pub use error::{Error, Result};
pub use intervention::{ActivationCache, PatchSpec, PatchTemplate, RunTriple};
pub use kernels::Matrix;
pub use model::{HookKind, HookPoint, HookSite, Model, ModelConfig, Positions, Weights};
pub use tokenizer::{SpanLabel, TokenRange, TokenSequence, Vocab};
