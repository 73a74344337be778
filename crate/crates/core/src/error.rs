// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use alloc::string::String;

use crate::model::HookPoint;

/// Errors raised anywhere in the engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        /// Operation that rejected the operands.
        op: &'static str,
        /// Rows of the left operand.
        left_rows: usize,
        /// Columns of the left operand.
        left_cols: usize,
        /// Rows of the right operand.
        right_rows: usize,
        /// Columns of the right operand.
        right_cols: usize,
    },

    /// A token id or vocabulary file entry is invalid.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// A named span could not be found.
    #[error("span error: {0}")]
    Span(String),

    /// A surface string or replacement does not line up with token boundaries,
    /// or a corrupted prompt does not keep the clean prompt's length.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A weight tensor is missing or has the wrong shape.
    #[error("weight error: {0}")]
    Weights(String),

    /// A patch specification cannot be applied to this run.
    #[error("patch error: {0}")]
    Patch(String),

    /// A hook point was requested from a cache that never recorded it.
    #[error("cache miss: {0} was not captured")]
    CacheMiss(HookPoint),

    /// Invalid configuration or an exhausted replacement pool.
    #[error("config error: {0}")]
    Config(String),

    /// `|LD_clean - LD_corrupt|` is too small to normalise by.
    #[error("degenerate normalization: clean-minus-corrupted gap {gap:e} is within {eps:e}")]
    DegenerateNormalization {
        /// The clean minus corrupted gap.
        gap: f64,
        /// Guard that the gap failed to exceed.
        eps: f64,
    },

    /// A relative-change metric would divide by a vanishing probability.
    #[error("divergent metric: denominator {denominator:e} is within {eps:e}")]
    DivergentMetric {
        /// The offending denominator.
        denominator: f64,
        /// Guard that the denominator failed to exceed.
        eps: f64,
    },
}

/// Convenience alias.
pub type Result<T> = core::result::Result<T, Error>;
