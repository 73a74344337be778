// SPDX-License-Identifier: MIT OR Apache-2.0

//! Building corrupted prompts: Gaussian noise on embeddings (GN), symmetric
//! token replacement (STR) and three fresh random names (ABC).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{EmbeddingOverride, Model, ModelInput};
use crate::tokenizer::{SpanLabel, TokenSequence, Vocab};

pub const DEFAULT_NOISE_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum CorruptionMethod {
    #[cfg_attr(feature = "serde", serde(rename = "GN", alias = "gn"))]
    Gn,
    #[cfg_attr(feature = "serde", serde(rename = "STR", alias = "str"))]
    Str,
    #[cfg_attr(
        feature = "serde",
        serde(rename = "ABC", alias = "abc", alias = "p_ABC")
    )]
    Abc,
}

impl CorruptionMethod {
    pub const fn as_str(self) -> &'static str {
        match self {
            CorruptionMethod::Gn => "GN",
            CorruptionMethod::Str => "STR",
            CorruptionMethod::Abc => "ABC",
        }
    }
}

impl fmt::Display for CorruptionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GN" => Ok(CorruptionMethod::Gn),
            "STR" => Ok(CorruptionMethod::Str),
            "ABC" | "P_ABC" => Ok(CorruptionMethod::Abc),
            _ => Err(Error::Config(format!("unknown corruption method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorruptionSpec {
    pub method: CorruptionMethod,
    pub targets: Vec<SpanLabel>,
    #[cfg_attr(feature = "serde", serde(default = "default_multiplier"))]
    pub noise_scale_multiplier: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub replacement_pool: Option<Vec<String>>,
}

#[cfg(feature = "serde")]
fn default_multiplier() -> f64 {
    DEFAULT_NOISE_MULTIPLIER
}

impl CorruptionSpec {
    pub fn new(method: CorruptionMethod, targets: Vec<SpanLabel>, seed: u64) -> Self {
        Self {
            method,
            targets,
            noise_scale_multiplier: DEFAULT_NOISE_MULTIPLIER,
            seed,
            replacement_pool: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config(
                "corruption needs at least one target span".into(),
            ));
        }
        if !(self.noise_scale_multiplier.is_finite() && self.noise_scale_multiplier >= 0.0) {
            return Err(Error::Config(
                "noise multiplier must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Answer tokens a metric is evaluated against.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Answer {
    /// Clean answer `r` and the corrupted prompt's answer `r'`.
    Pair { correct: u32, incorrect: u32 },
    /// Greater-than answer sets.
    Sets { greater: Vec<u32>, less: Vec<u32> },
}

impl Answer {
    pub fn validate(&self) -> Result<()> {
        match self {
            Answer::Pair { correct, incorrect } if correct == incorrect => Err(Error::Config(
                format!("answer r and r' coincide (token {correct})"),
            )),
            Answer::Sets { greater, less } => {
                if greater.is_empty() || less.is_empty() {
                    return Err(Error::Config("answer sets must be non-empty".into()));
                }
                if greater.iter().any(|g| less.contains(g)) {
                    return Err(Error::Config("answer sets overlap".into()));
                }
                Ok(())
            }
            Answer::Pair { .. } => Ok(()),
        }
    }
}

/// A corrupted prompt, either as tokens or as noised embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Corrupted {
    Tokens(TokenSequence),
    Noised {
        seq: TokenSequence,
        embedding: EmbeddingOverride,
    },
}

impl Corrupted {
    pub fn seq(&self) -> &TokenSequence {
        match self {
            Corrupted::Tokens(s) | Corrupted::Noised { seq: s, .. } => s,
        }
    }

    pub fn len(&self) -> usize {
        self.seq().len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq().is_empty()
    }

    pub fn input(&self) -> ModelInput<'_> {
        match self {
            Corrupted::Tokens(s) => ModelInput::Tokens(&s.ids),
            Corrupted::Noised { embedding, .. } => ModelInput::Embedded(embedding),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub clean: TokenSequence,
    pub corrupt: Corrupted,
    pub answer: Answer,
}

impl PromptPair {
    pub fn validate(&self) -> Result<()> {
        if self.clean.len() != self.corrupt.len() {
            return Err(Error::Alignment(format!(
                "clean prompt has {} tokens, corrupted has {}",
                self.clean.len(),
                self.corrupt.len()
            )));
        }
        self.answer.validate()
    }
}

/// `multiplier ×` population SD over every entry of the token-embedding rows
/// of every token occurrence in `prompts`.
pub fn embedding_noise_scale<'a>(
    prompts: impl IntoIterator<Item = &'a [u32]>,
    model: &Model,
    multiplier: f64,
) -> Result<f64> {
    let wte = &model.weights().token_embedding;
    let rows: Vec<&[f32]> = prompts
        .into_iter()
        .flat_map(|ids| ids.iter())
        .map(|&id| {
            if (id as usize) < wte.rows() {
                Ok(wte.row(id as usize))
            } else {
                Err(Error::Vocab(format!("token id {id} out of range")))
            }
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Config(
            "noise scale needs a non-empty prompt set".into(),
        ));
    }
    let count = (rows.len() * wte.cols()) as f64;
    let mean = rows
        .iter()
        .flat_map(|r| r.iter())
        .map(|&v| f64::from(v))
        .sum::<f64>()
        / count;
    let var = rows
        .iter()
        .flat_map(|r| r.iter())
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / count;
    Ok(multiplier * math::sqrt(var))
}

/// Per-prompt generator: one ChaCha stream per `(seed, index)`.
pub fn prompt_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Adds i.i.d. `N(0, nu²)` noise to the token+position embedding rows at the
/// target spans.
pub fn corrupt_gn(
    model: &Model,
    seq: &TokenSequence,
    targets: &[SpanLabel],
    nu: f64,
    seed: u64,
    index: u64,
) -> Result<EmbeddingOverride> {
    let positions = seq.positions_of(targets)?;
    let mut embedded = model.embed(&seq.ids)?;
    if !(nu.is_finite() && nu >= 0.0) {
        return Err(Error::Config(format!(
            "noise scale {nu} must be finite and non-negative"
        )));
    }
    if nu > 0.0 {
        let normal = Normal::new(0.0f64, nu).map_err(|e| Error::Config(format!("noise: {e}")))?;
        let mut rng = prompt_rng(seed, index);
        for p in positions {
            for v in embedded.row_mut(p) {
                *v += normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(EmbeddingOverride {
        ids: seq.ids.clone(),
        embedded,
    })
}

/// Overwrites span tokens with replacement ids of the same length.
///
/// The edited ids must decode and re-encode to themselves, so the corrupted
/// prompt is something the tokenizer could have produced.
pub fn corrupt_str(
    vocab: &Vocab,
    seq: &TokenSequence,
    edits: &[(SpanLabel, Vec<u32>)],
) -> Result<TokenSequence> {
    let mut ids = seq.ids.clone();
    for (label, replacement) in edits {
        let span = seq.span(*label)?;
        if replacement.len() != span.len() {
            return Err(Error::Alignment(format!(
                "replacement for {label} has {} tokens, span has {}",
                replacement.len(),
                span.len()
            )));
        }
        ids[span.start..span.end].copy_from_slice(replacement);
    }
    let text = vocab.decode(&ids)?;
    let reencoded = vocab.encode_ids(&text);
    if reencoded != ids {
        return Err(Error::Alignment(format!(
            "corrupted text {text:?} re-encodes to {} tokens differently from the edit",
            reencoded.len()
        )));
    }
    Ok(TokenSequence {
        ids,
        text,
        spans: seq.spans.clone(),
    })
}

/// Single-token ids of ` name` for each pool entry, skipping entries that do
/// not encode to one token.
pub fn name_tokens(vocab: &Vocab, pool: &[String]) -> Vec<u32> {
    let mut out: Vec<u32> = pool
        .iter()
        .filter_map(|n| vocab.single_token(&format!(" {}", n.trim())))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Draws `k` distinct tokens from `pool`, excluding `avoid`.
pub fn draw_distinct(
    pool: &[u32],
    avoid: &[u32],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    let eligible: Vec<u32> = pool
        .iter()
        .copied()
        .filter(|t| !avoid.contains(t))
        .collect();
    if eligible.len() < k {
        return Err(Error::Config(format!(
            "replacement pool exhausted: need {k}, {} eligible",
            eligible.len()
        )));
    }
    Ok(index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect())
}

/// Replaces S1, S2 and IO with three distinct names, none equal to the
/// originals.
pub fn corrupt_abc(
    vocab: &Vocab,
    seq: &TokenSequence,
    pool: &[u32],
    seed: u64,
    index: u64,
) -> Result<TokenSequence> {
    let s1 = seq.span(SpanLabel::S1)?;
    let s2 = seq.span(SpanLabel::S2)?;
    let io = seq.span(SpanLabel::Io)?;
    let avoid: Vec<u32> = [s1, s2, io]
        .iter()
        .flat_map(|r| seq.ids[r.start..r.end].iter().copied())
        .collect();
    let mut rng = prompt_rng(seed, index);
    let names = draw_distinct(pool, &avoid, 3, &mut rng)?;
    corrupt_str(
        vocab,
        seq,
        &[
            (SpanLabel::S1, alloc::vec![names[0]]),
            (SpanLabel::S2, alloc::vec![names[1]]),
            (SpanLabel::Io, alloc::vec![names[2]]),
        ],
    )
}
