// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2-family forward pass with hook sites.
//!
//! Block ordering is pre-layernorm:
//!
//! ```text
//! x0         = wte[ids] + wpe[0..n]                    (embed_out)
//! per head j : A = softmax_causal(q kᵀ / sqrt(d_head)) (attn_pattern)
//!              z = A v                                 (attn_value = v, head_out = z)
//! mid        = x + Σ_j z_j W_O^j + b_O                 (attn_sublayer_out)
//! mlp        = W_out gelu(W_in ln2(mid) + b_in) + b_out (mlp_out)
//! x'         = mid + mlp                               (resid_post)
//! logits     = ln_f(x_L) W_U                           (final_logits)
//! ```
//!
//! A batch of prompts is packed row-wise into one residual matrix. Attention
//! is computed per prompt, so no position ever sees another prompt's rows and
//! each prompt's output is bit-identical to running it alone.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::intervention::{ActivationCache, PatchSpec};
use crate::kernels::{self, Matrix};
use crate::math;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub attn_only: bool,
    #[cfg_attr(feature = "serde", serde(default = "default_eps"))]
    pub layer_norm_eps: f32,
    /// GPT-J style parallel attention/MLP. Always rejected by [`ModelConfig::validate`].
    #[cfg_attr(feature = "serde", serde(default))]
    pub parallel_blocks: bool,
}

#[cfg(feature = "serde")]
fn default_eps() -> f32 {
    kernels::LAYERNORM_EPS
}

impl ModelConfig {
    /// Published GPT-2 small dimensions.
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_mlp: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            attn_only: false,
            layer_norm_eps: kernels::LAYERNORM_EPS,
            parallel_blocks: false,
        }
    }

    /// Small config for tests and demos: `n_layers` layers, `n_heads` heads of width `d_model / n_heads`.
    pub fn toy(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_mlp: 4 * d_model,
            vocab_size,
            max_positions: 128,
            attn_only: false,
            layer_norm_eps: kernels::LAYERNORM_EPS,
            parallel_blocks: false,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("model config: {msg}")));
        if self.parallel_blocks {
            return bad("parallel attention/MLP blocks are not supported");
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("n_layers, n_heads and d_model must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab_size and max_positions must be positive");
        }
        if !self.attn_only && self.d_mlp == 0 {
            return bad("d_mlp must be positive unless attn_only");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Fused QKV projection (`d × 3d`, columns `[Q | K | V]`, each split
/// head-major) and output projection (`d × d`, rows head-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub qkv: Matrix,
    pub qkv_bias: Vec<f32>,
    pub out: Matrix,
    pub out_bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc: Matrix,
    pub fc_bias: Vec<f32>,
    pub proj: Matrix,
    pub proj_bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: Option<LayerNorm>,
    pub mlp: Option<Mlp>,
}

/// All parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `V × d`.
    pub token_embedding: Matrix,
    /// `N_max × d`.
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    /// Separate `V × d` unembedding; `None` ties it to `token_embedding`.
    pub unembedding: Option<Matrix>,
}

impl Weights {
    /// Seeded Gaussian weights shaped for `config`.
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut mat = |rows: usize, cols: usize, std: f32| {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let w_std = 1.0 / math::sqrt(d as f64) as f32;
        let token_embedding = mat(config.vocab_size, d, 1.0);
        let position_embedding = mat(config.max_positions, d, 0.5);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let qkv = mat(d, 3 * d, w_std);
            let qkv_bias = mat(1, 3 * d, 0.05).into_vec();
            let out = mat(d, d, w_std);
            let out_bias = mat(1, d, 0.05).into_vec();
            let ln1 = LayerNorm {
                gamma: mat(1, d, 0.1)
                    .into_vec()
                    .into_iter()
                    .map(|v| 1.0 + v)
                    .collect(),
                beta: mat(1, d, 0.1).into_vec(),
            };
            let (ln2, mlp) = if config.attn_only {
                (None, None)
            } else {
                let ln2 = LayerNorm {
                    gamma: mat(1, d, 0.1)
                        .into_vec()
                        .into_iter()
                        .map(|v| 1.0 + v)
                        .collect(),
                    beta: mat(1, d, 0.1).into_vec(),
                };
                let mlp_std = 1.0 / math::sqrt(config.d_mlp as f64) as f32;
                let mlp = Mlp {
                    fc: mat(d, config.d_mlp, w_std),
                    fc_bias: mat(1, config.d_mlp, 0.05).into_vec(),
                    proj: mat(config.d_mlp, d, mlp_std),
                    proj_bias: mat(1, d, 0.05).into_vec(),
                };
                (Some(ln2), Some(mlp))
            };
            blocks.push(Block {
                ln1,
                attn: Attention {
                    qkv,
                    qkv_bias,
                    out,
                    out_bias,
                },
                ln2,
                mlp,
            });
        }
        let final_ln = LayerNorm {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        };
        Self {
            token_embedding,
            position_embedding,
            blocks,
            final_ln,
            unembedding: None,
        }
    }
}

/// What a hook point observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HookKind {
    /// Token plus position embedding, `n × d`.
    EmbedOut,
    /// Post-softmax attention pattern of one head, `n × n`.
    AttnPattern,
    /// Value vectors of one head, `n × d_head`.
    AttnValue,
    /// Per-head result `z = A v` before `W_O`, `n × d_head`.
    HeadOut,
    /// Residual stream after the attention sublayer, `n × d`.
    AttnSublayerOut,
    /// MLP sublayer output before the residual add, `n × d`.
    MlpOut,
    /// Residual stream after the whole block, `n × d`.
    ResidPost,
    /// Unembedding output, `n × V`.
    FinalLogits,
}

impl HookKind {
    pub const fn is_per_head(self) -> bool {
        matches!(
            self,
            HookKind::AttnPattern | HookKind::AttnValue | HookKind::HeadOut
        )
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            HookKind::EmbedOut => "embed_out",
            HookKind::AttnPattern => "attn_pattern",
            HookKind::AttnValue => "attn_value",
            HookKind::HeadOut => "head_out",
            HookKind::AttnSublayerOut => "attn_sublayer_out",
            HookKind::MlpOut => "mlp_out",
            HookKind::ResidPost => "resid_post",
            HookKind::FinalLogits => "final_logits",
        }
    }
}

/// Cache key: which activation of which layer (and head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HookPoint {
    pub layer: usize,
    pub kind: HookKind,
    pub head: Option<usize>,
}

impl HookPoint {
    pub const fn embed_out() -> Self {
        Self {
            layer: 0,
            kind: HookKind::EmbedOut,
            head: None,
        }
    }
    pub const fn attn_pattern(layer: usize, head: usize) -> Self {
        Self {
            layer,
            kind: HookKind::AttnPattern,
            head: Some(head),
        }
    }
    pub const fn attn_value(layer: usize, head: usize) -> Self {
        Self {
            layer,
            kind: HookKind::AttnValue,
            head: Some(head),
        }
    }
    pub const fn head_out(layer: usize, head: usize) -> Self {
        Self {
            layer,
            kind: HookKind::HeadOut,
            head: Some(head),
        }
    }
    pub const fn attn_sublayer_out(layer: usize) -> Self {
        Self {
            layer,
            kind: HookKind::AttnSublayerOut,
            head: None,
        }
    }
    pub const fn mlp_out(layer: usize) -> Self {
        Self {
            layer,
            kind: HookKind::MlpOut,
            head: None,
        }
    }
    pub const fn resid_post(layer: usize) -> Self {
        Self {
            layer,
            kind: HookKind::ResidPost,
            head: None,
        }
    }
    /// Logits are keyed at the last layer.
    pub const fn final_logits(n_layers: usize) -> Self {
        Self {
            layer: n_layers - 1,
            kind: HookKind::FinalLogits,
            head: None,
        }
    }

    /// Checks the point exists in a model with this config.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(Error::Config(format!(
                "{self}: layer out of range for {} layers",
                config.n_layers
            )));
        }
        match (self.kind.is_per_head(), self.head) {
            (true, Some(h)) if h < config.n_heads => {}
            (false, None) => {}
            _ => {
                return Err(Error::Config(format!(
                    "{self}: head must be set exactly for per-head sites"
                )))
            }
        }
        if self.kind == HookKind::MlpOut && config.attn_only {
            return Err(Error::Config(format!(
                "{self}: attention-only model has no MLP"
            )));
        }
        if self.kind == HookKind::EmbedOut && self.layer != 0 {
            return Err(Error::Config(format!("{self}: embed_out lives at layer 0")));
        }
        Ok(())
    }

    /// Columns of the activation tensor this point stores.
    pub fn width(&self, config: &ModelConfig, seq_len: usize) -> usize {
        match self.kind {
            HookKind::AttnPattern => seq_len,
            HookKind::AttnValue | HookKind::HeadOut => config.d_head(),
            HookKind::FinalLogits => config.vocab_size,
            _ => config.d_model,
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.head) {
            (HookKind::EmbedOut, _) => f.write_str("embed_out"),
            (HookKind::FinalLogits, _) => f.write_str("final_logits"),
            (kind, Some(h)) => write!(f, "{}[{}.{}]", kind.as_str(), self.layer, h),
            (kind, None) => write!(f, "{}[{}]", kind.as_str(), self.layer),
        }
    }
}

/// Token positions a patch overwrites.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Positions {
    All,
    /// Sorted, deduplicated.
    Only(Vec<usize>),
}

impl Positions {
    pub fn only(positions: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = positions.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Positions::Only(v)
    }

    pub fn resolve(&self, seq_len: usize) -> Result<Vec<usize>> {
        match self {
            Positions::All => Ok((0..seq_len).collect()),
            Positions::Only(v) => {
                if let Some(&p) = v.iter().find(|&&p| p >= seq_len) {
                    return Err(Error::Patch(format!(
                        "position {p} exceeds sequence length {seq_len}"
                    )));
                }
                Ok(v.clone())
            }
        }
    }

    /// Union of two position sets.
    pub fn union(&self, other: &Positions) -> Positions {
        match (self, other) {
            (Positions::All, _) | (_, Positions::All) => Positions::All,
            (Positions::Only(a), Positions::Only(b)) => Positions::only(a.iter().chain(b).copied()),
        }
    }
}

/// A hook point restricted to a set of positions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HookSite {
    pub point: HookPoint,
    pub positions: Positions,
}

impl HookSite {
    pub fn all(point: HookPoint) -> Self {
        Self {
            point,
            positions: Positions::All,
        }
    }

    pub fn at(point: HookPoint, positions: impl IntoIterator<Item = usize>) -> Self {
        Self {
            point,
            positions: Positions::only(positions),
        }
    }
}

/// Precomputed residual-stream input used in place of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingOverride {
    /// Token ids the rows were derived from.
    pub ids: Vec<u32>,
    /// `n × d` rows fed in as `embed_out`.
    pub embedded: Matrix,
}

#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Tokens(&'a [u32]),
    Embedded(&'a EmbeddingOverride),
}

impl ModelInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Tokens(ids) => ids.len(),
            ModelInput::Embedded(e) => e.embedded.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which rows of the unembedding to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitRows {
    #[default]
    All,
    /// Final position only; the record's logits are `1 × V`.
    Last,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub capture: BTreeSet<HookPoint>,
    pub logits: LogitRows,
    /// First block to run. Layers before it are taken from each item's
    /// `resume` cache (`resid_post` of `start_layer - 1`).
    pub start_layer: usize,
}

impl ForwardOptions {
    pub fn capturing(points: impl IntoIterator<Item = HookPoint>) -> Self {
        Self {
            capture: points.into_iter().collect(),
            ..Self::default()
        }
    }
}

/// One prompt of a packed batch.
#[derive(Debug, Clone, Copy)]
pub struct ForwardItem<'a> {
    pub input: ModelInput<'a>,
    pub patch: Option<&'a PatchSpec<'a>>,
    pub resume: Option<&'a ActivationCache>,
}

impl<'a> ForwardItem<'a> {
    pub fn new(input: ModelInput<'a>) -> Self {
        Self {
            input,
            patch: None,
            resume: None,
        }
    }

    pub fn with_patch(mut self, patch: &'a PatchSpec<'a>) -> Self {
        self.patch = Some(patch);
        self
    }

    pub fn resuming(mut self, cache: &'a ActivationCache) -> Self {
        self.resume = Some(cache);
        self
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    /// `n × V`, or `1 × V` for [`LogitRows::Last`].
    pub logits: Matrix,
    pub seq_len: usize,
    pub cache: ActivationCache,
}

impl ForwardRecord {
    /// Logits at the final position.
    pub fn final_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }

    pub fn attn_pattern(&self, layer: usize, head: usize) -> Result<&Matrix> {
        self.cache.require(&HookPoint::attn_pattern(layer, head))
    }

    /// Per-head result `z = A v` (before `W_O`), one row per position.
    pub fn head_contribution(&self, layer: usize, head: usize) -> Result<&Matrix> {
        self.cache.require(&HookPoint::head_out(layer, head))
    }
}

/// A validated model ready for inference.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    /// `d × V`, transposed once so logits use the blocked kernel.
    unembed: Matrix,
}

fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Weights(format!(
            "{name}: expected {rows}x{cols}, found {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Weights(format!("{name}: non-finite values")));
    }
    Ok(())
}

fn check_vec(name: &str, v: &[f32], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Weights(format!(
            "{name}: expected length {len}, found {}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Weights(format!("{name}: non-finite values")));
    }
    Ok(())
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        check_shape("token_embedding", &weights.token_embedding, v, d)?;
        check_shape(
            "position_embedding",
            &weights.position_embedding,
            config.max_positions,
            d,
        )?;
        if weights.blocks.len() != config.n_layers {
            return Err(Error::Weights(format!(
                "expected {} blocks, found {}",
                config.n_layers,
                weights.blocks.len()
            )));
        }
        for (i, b) in weights.blocks.iter().enumerate() {
            check_vec(&format!("h.{i}.ln_1.weight"), &b.ln1.gamma, d)?;
            check_vec(&format!("h.{i}.ln_1.bias"), &b.ln1.beta, d)?;
            check_shape(&format!("h.{i}.attn.c_attn.weight"), &b.attn.qkv, d, 3 * d)?;
            check_vec(&format!("h.{i}.attn.c_attn.bias"), &b.attn.qkv_bias, 3 * d)?;
            check_shape(&format!("h.{i}.attn.c_proj.weight"), &b.attn.out, d, d)?;
            check_vec(&format!("h.{i}.attn.c_proj.bias"), &b.attn.out_bias, d)?;
            match (config.attn_only, &b.ln2, &b.mlp) {
                (true, None, None) => {}
                (false, Some(ln2), Some(mlp)) => {
                    check_vec(&format!("h.{i}.ln_2.weight"), &ln2.gamma, d)?;
                    check_vec(&format!("h.{i}.ln_2.bias"), &ln2.beta, d)?;
                    check_shape(&format!("h.{i}.mlp.c_fc.weight"), &mlp.fc, d, config.d_mlp)?;
                    check_vec(&format!("h.{i}.mlp.c_fc.bias"), &mlp.fc_bias, config.d_mlp)?;
                    check_shape(
                        &format!("h.{i}.mlp.c_proj.weight"),
                        &mlp.proj,
                        config.d_mlp,
                        d,
                    )?;
                    check_vec(&format!("h.{i}.mlp.c_proj.bias"), &mlp.proj_bias, d)?;
                }
                (true, _, _) => {
                    return Err(Error::Weights(format!(
                        "h.{i}: attention-only model has MLP weights"
                    )))
                }
                (false, _, _) => return Err(Error::Weights(format!("h.{i}: missing MLP weights"))),
            }
        }
        check_vec("ln_f.weight", &weights.final_ln.gamma, d)?;
        check_vec("ln_f.bias", &weights.final_ln.beta, d)?;
        let unembed = match &weights.unembedding {
            Some(u) => {
                check_shape("lm_head.weight", u, v, d)?;
                u.transpose()
            }
            None => weights.token_embedding.transpose(),
        };
        Ok(Self {
            config,
            weights,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// `W_Q`, `W_K`, `W_V` slices (`d × d_head`) of one head.
    pub fn head_qkv_weights(&self, layer: usize, head: usize) -> Result<[Matrix; 3]> {
        let d = self.config.d_model;
        let dh = self.config.d_head();
        self.check_head(layer, head)?;
        let qkv = &self.weights.blocks[layer].attn.qkv;
        Ok([0, 1, 2].map(|part| qkv.slice_cols(part * d + head * dh, part * d + (head + 1) * dh)))
    }

    /// `W_O` slice (`d_head × d`) of one head.
    pub fn head_output_weights(&self, layer: usize, head: usize) -> Result<Matrix> {
        let dh = self.config.d_head();
        self.check_head(layer, head)?;
        Ok(self.weights.blocks[layer]
            .attn
            .out
            .slice_rows(head * dh, (head + 1) * dh))
    }

    fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(Error::Config(format!("head {layer}.{head} out of range")));
        }
        Ok(())
    }

    /// Residual-stream contribution `z · W_O^{layer,head}` of one head.
    pub fn head_residual_contribution(
        &self,
        layer: usize,
        head: usize,
        z: &Matrix,
    ) -> Result<Matrix> {
        kernels::matmul(z, &self.head_output_weights(layer, head)?)
    }

    /// `wte[ids] + wpe[0..n]`, the `embed_out` activation.
    pub fn embed(&self, ids: &[u32]) -> Result<Matrix> {
        self.check_len(ids.len())?;
        let d = self.config.d_model;
        let mut out = Matrix::zeros(ids.len(), d);
        for (p, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Vocab(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            let tok = self.weights.token_embedding.row(id as usize);
            let pos = self.weights.position_embedding.row(p);
            for ((o, &t), &q) in out.row_mut(p).iter_mut().zip(tok).zip(pos) {
                *o = t + q;
            }
        }
        Ok(out)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.config.max_positions {
            return Err(Error::Config(format!(
                "sequence length {n} outside 1..={}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    /// Single forward pass.
    pub fn forward(
        &self,
        input: ModelInput<'_>,
        options: &ForwardOptions,
        patch: Option<&PatchSpec<'_>>,
    ) -> Result<ForwardRecord> {
        let item = ForwardItem {
            input,
            patch,
            resume: None,
        };
        let mut out = self.forward_batch(&[item], options)?;
        Ok(out.pop().expect("one record per item"))
    }

    /// Runs every item in one packed pass.
    pub fn forward_batch(
        &self,
        items: &[ForwardItem<'_>],
        options: &ForwardOptions,
    ) -> Result<Vec<ForwardRecord>> {
        let cfg = &self.config;
        let (d, dh, n_heads) = (cfg.d_model, cfg.d_head(), cfg.n_heads);
        if options.start_layer > cfg.n_layers {
            return Err(Error::Config(format!(
                "start layer {} beyond model depth",
                options.start_layer
            )));
        }
        for point in &options.capture {
            point.validate(cfg)?;
            if options.start_layer > 0
                && (point.layer < options.start_layer || point.kind == HookKind::EmbedOut)
            {
                return Err(Error::Config(format!(
                    "cannot capture {point} when resuming at layer {}",
                    options.start_layer
                )));
            }
        }

        let mut segs = Vec::with_capacity(items.len());
        let mut total = 0;
        for item in items {
            let n = item.input.len();
            self.check_len(n)?;
            if let Some(patch) = item.patch {
                self.check_patch(patch, n, options.start_layer)?;
            }
            segs.push((total, n));
            total += n;
        }
        let mut caches: Vec<ActivationCache> =
            segs.iter().map(|&(_, n)| ActivationCache::new(n)).collect();

        let mut resid = Matrix::zeros(total, d);
        if options.start_layer == 0 {
            for (i, item) in items.iter().enumerate() {
                let (off, n) = segs[i];
                let rows = match item.input {
                    ModelInput::Tokens(ids) => self.embed(ids)?,
                    ModelInput::Embedded(e) => {
                        if e.embedded.shape() != (n, d) || e.ids.len() != n {
                            return Err(Error::Shape {
                                op: "embedding override",
                                left_rows: n,
                                left_cols: d,
                                right_rows: e.embedded.rows(),
                                right_cols: e.embedded.cols(),
                            });
                        }
                        e.embedded.clone()
                    }
                };
                resid.write_block(off, 0, &rows);
            }
            self.hook_rows(
                HookPoint::embed_out(),
                &mut resid,
                items,
                &segs,
                &mut caches,
                options,
            )?;
        } else {
            let point = HookPoint::resid_post(options.start_layer - 1);
            for (i, item) in items.iter().enumerate() {
                let cache = item
                    .resume
                    .ok_or_else(|| Error::Config(format!("item {i} has no resume cache")))?;
                let rows = cache.require(&point)?;
                if rows.shape() != (segs[i].1, d) {
                    return Err(Error::Patch(format!(
                        "resume tensor {point} has wrong shape"
                    )));
                }
                resid.write_block(segs[i].0, 0, rows);
            }
        }

        for layer in options.start_layer..cfg.n_layers {
            let block = &self.weights.blocks[layer];
            let normed = kernels::layernorm_rows(
                &resid,
                &block.ln1.gamma,
                &block.ln1.beta,
                cfg.layer_norm_eps,
            )?;
            let qkv = kernels::linear(&normed, &block.attn.qkv, Some(&block.attn.qkv_bias))?;
            let mut z_all = Matrix::zeros(total, d);
            let scale = 1.0 / math::sqrt(dh as f64);
            for (i, item) in items.iter().enumerate() {
                let (off, n) = segs[i];
                let seg = qkv.slice_rows(off, off + n);
                for head in 0..n_heads {
                    let q = seg.slice_cols(head * dh, (head + 1) * dh);
                    let k = seg.slice_cols(d + head * dh, d + (head + 1) * dh);
                    let mut v = seg.slice_cols(2 * d + head * dh, 2 * d + (head + 1) * dh);
                    self.hook_head(
                        HookPoint::attn_value(layer, head),
                        &mut v,
                        item,
                        &mut caches[i],
                        options,
                    )?;

                    let mut pattern = Matrix::zeros(n, n);
                    for r in 0..n {
                        for c in 0..=r {
                            let mut acc = 0.0f64;
                            for (&a, &b) in q.row(r).iter().zip(k.row(c)) {
                                acc += f64::from(a) * f64::from(b);
                            }
                            pattern.set(r, c, (acc * scale) as f32);
                        }
                    }
                    kernels::softmax_rows_in_place(&mut pattern, true);
                    self.hook_head(
                        HookPoint::attn_pattern(layer, head),
                        &mut pattern,
                        item,
                        &mut caches[i],
                        options,
                    )?;

                    let mut z = kernels::matmul(&pattern, &v)?;
                    self.hook_head(
                        HookPoint::head_out(layer, head),
                        &mut z,
                        item,
                        &mut caches[i],
                        options,
                    )?;
                    z_all.write_block(off, head * dh, &z);
                }
            }
            let attn_out = kernels::linear(&z_all, &block.attn.out, Some(&block.attn.out_bias))?;
            resid.add_assign(&attn_out)?;
            self.hook_rows(
                HookPoint::attn_sublayer_out(layer),
                &mut resid,
                items,
                &segs,
                &mut caches,
                options,
            )?;

            if let (Some(ln2), Some(mlp)) = (&block.ln2, &block.mlp) {
                let normed =
                    kernels::layernorm_rows(&resid, &ln2.gamma, &ln2.beta, cfg.layer_norm_eps)?;
                let mut hidden = kernels::linear(&normed, &mlp.fc, Some(&mlp.fc_bias))?;
                kernels::gelu_in_place(&mut hidden);
                let mut mlp_out = kernels::linear(&hidden, &mlp.proj, Some(&mlp.proj_bias))?;
                self.hook_rows(
                    HookPoint::mlp_out(layer),
                    &mut mlp_out,
                    items,
                    &segs,
                    &mut caches,
                    options,
                )?;
                resid.add_assign(&mlp_out)?;
            }
            self.hook_rows(
                HookPoint::resid_post(layer),
                &mut resid,
                items,
                &segs,
                &mut caches,
                options,
            )?;
        }

        let rows: Vec<usize> = match options.logits {
            LogitRows::All => (0..total).collect(),
            LogitRows::Last => segs.iter().map(|&(off, n)| off + n - 1).collect(),
        };
        let mut final_in = Matrix::zeros(rows.len(), d);
        for (dst, &src) in rows.iter().enumerate() {
            final_in.row_mut(dst).copy_from_slice(resid.row(src));
        }
        let ln_f = &self.weights.final_ln;
        let normed =
            kernels::layernorm_rows(&final_in, &ln_f.gamma, &ln_f.beta, cfg.layer_norm_eps)?;
        let logits = kernels::linear(&normed, &self.unembed, None)?;

        let logits_point = HookPoint::final_logits(cfg.n_layers);
        let mut records = Vec::with_capacity(items.len());
        let mut row_at = 0;
        for (i, (item, cache)) in items.iter().zip(caches).enumerate() {
            let (_, n) = segs[i];
            let count = match options.logits {
                LogitRows::All => n,
                LogitRows::Last => 1,
            };
            let mut mine = logits.slice_rows(row_at, row_at + count);
            row_at += count;
            let mut cache = cache;
            if let Some((site, cached)) = item.patch.and_then(|p| p.lookup(&logits_point)) {
                for pos in site.positions.resolve(n)? {
                    let dst = match options.logits {
                        LogitRows::All => Some(pos),
                        LogitRows::Last => (pos == n - 1).then_some(0),
                    };
                    if let Some(dst) = dst {
                        mine.row_mut(dst).copy_from_slice(cached.row(pos));
                    }
                }
            }
            if options.capture.contains(&logits_point) {
                cache.insert(logits_point, mine.clone());
            }
            records.push(ForwardRecord {
                logits: mine,
                seq_len: n,
                cache,
            });
        }
        Ok(records)
    }

    fn check_patch(&self, patch: &PatchSpec<'_>, n: usize, start_layer: usize) -> Result<()> {
        if patch.source().seq_len() != n {
            return Err(Error::Patch(format!(
                "patch source has length {}, run has length {n}",
                patch.source().seq_len()
            )));
        }
        for site in patch.sites() {
            site.point.validate(&self.config)?;
            if start_layer > 0
                && (site.point.layer < start_layer || site.point.kind == HookKind::EmbedOut)
            {
                return Err(Error::Patch(format!(
                    "{} lies before resume layer {start_layer}",
                    site.point
                )));
            }
            let cached = patch.source().require(&site.point)?;
            let width = site.point.width(&self.config, n);
            if cached.shape() != (n, width) {
                return Err(Error::Patch(format!(
                    "{}: cached tensor is {}x{}, site needs {n}x{width}",
                    site.point,
                    cached.rows(),
                    cached.cols()
                )));
            }
            site.positions.resolve(n)?;
        }
        Ok(())
    }

    /// Patches then captures a per-head activation of one item.
    fn hook_head(
        &self,
        point: HookPoint,
        act: &mut Matrix,
        item: &ForwardItem<'_>,
        cache: &mut ActivationCache,
        options: &ForwardOptions,
    ) -> Result<()> {
        if let Some((site, cached)) = item.patch.and_then(|p| p.lookup(&point)) {
            for pos in site.positions.resolve(act.rows())? {
                act.row_mut(pos).copy_from_slice(cached.row(pos));
            }
        }
        if options.capture.contains(&point) {
            cache.insert(point, act.clone());
        }
        Ok(())
    }

    /// Patches then captures a packed `T × width` activation for every item.
    fn hook_rows(
        &self,
        point: HookPoint,
        act: &mut Matrix,
        items: &[ForwardItem<'_>],
        segs: &[(usize, usize)],
        caches: &mut [ActivationCache],
        options: &ForwardOptions,
    ) -> Result<()> {
        let capture = options.capture.contains(&point);
        for (i, item) in items.iter().enumerate() {
            let (off, n) = segs[i];
            if let Some((site, cached)) = item.patch.and_then(|p| p.lookup(&point)) {
                for pos in site.positions.resolve(n)? {
                    act.row_mut(off + pos).copy_from_slice(cached.row(pos));
                }
            }
            if capture {
                caches[i].insert(point, act.slice_rows(off, off + n));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::PatchTemplate;
    use alloc::string::ToString;

    fn toy() -> Model {
        let cfg = ModelConfig::toy(2, 2, 16, 50);
        Model::new(cfg.clone(), Weights::random(&cfg, 7)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy(2, 3, 16, 10);
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.validate().unwrap();
        c.parallel_blocks = true;
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::gpt2_small().d_head(), 64);
    }

    #[test]
    fn hook_point_validation() {
        let c = ModelConfig::toy(2, 2, 16, 10);
        HookPoint::head_out(1, 1).validate(&c).unwrap();
        assert!(HookPoint::head_out(2, 0).validate(&c).is_err());
        assert!(HookPoint {
            layer: 0,
            kind: HookKind::MlpOut,
            head: Some(0)
        }
        .validate(&c)
        .is_err());
        assert!(HookPoint {
            layer: 0,
            kind: HookKind::HeadOut,
            head: None
        }
        .validate(&c)
        .is_err());
        let mut attn_only = c.clone();
        attn_only.attn_only = true;
        assert!(HookPoint::mlp_out(0).validate(&attn_only).is_err());
    }

    #[test]
    fn shape_errors_name_the_tensor() {
        let cfg = ModelConfig::toy(2, 2, 16, 50);
        let mut w = Weights::random(&cfg, 1);
        w.blocks[1].attn.out = Matrix::zeros(16, 15);
        let err = Model::new(cfg, w).unwrap_err();
        assert!(err.to_string().contains("h.1.attn.c_proj.weight"), "{err}");
    }

    #[test]
    fn attn_only_rejects_mlp_weights() {
        let mut cfg = ModelConfig::toy(1, 2, 8, 20);
        let w = Weights::random(&cfg, 1);
        cfg.attn_only = true;
        assert!(Model::new(cfg.clone(), w).is_err());
        Model::new(cfg.clone(), Weights::random(&cfg, 1)).unwrap();
    }

    #[test]
    fn forward_is_deterministic() {
        let m = toy();
        let ids = [1, 4, 9, 16, 25];
        let a = m
            .forward(ModelInput::Tokens(&ids), &ForwardOptions::default(), None)
            .unwrap();
        let b = m
            .forward(ModelInput::Tokens(&ids), &ForwardOptions::default(), None)
            .unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits.shape(), (5, 50));
        assert!(a.logits.is_finite());
    }

    #[test]
    fn last_row_mode_matches_full() {
        let m = toy();
        let ids = [3, 1, 4, 1, 5, 9];
        let full = m
            .forward(ModelInput::Tokens(&ids), &ForwardOptions::default(), None)
            .unwrap();
        let opts = ForwardOptions {
            logits: LogitRows::Last,
            ..Default::default()
        };
        let last = m.forward(ModelInput::Tokens(&ids), &opts, None).unwrap();
        assert_eq!(last.logits.rows(), 1);
        assert_eq!(last.final_logits(), full.final_logits());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = toy();
        assert!(m
            .forward(ModelInput::Tokens(&[]), &ForwardOptions::default(), None)
            .is_err());
        assert!(m
            .forward(ModelInput::Tokens(&[50]), &ForwardOptions::default(), None)
            .is_err());
        let long = vec![0u32; 129];
        assert!(m
            .forward(ModelInput::Tokens(&long), &ForwardOptions::default(), None)
            .is_err());
    }

    #[test]
    fn patch_position_beyond_length_is_rejected() {
        let m = toy();
        let ids = [1, 2, 3];
        let opts = ForwardOptions::capturing([HookPoint::mlp_out(0)]);
        let rec = m.forward(ModelInput::Tokens(&ids), &opts, None).unwrap();
        let tpl = PatchTemplate::new(vec![HookSite::at(HookPoint::mlp_out(0), [5])]).unwrap();
        let spec = tpl.bind(&rec.cache).unwrap();
        let err = m
            .forward(
                ModelInput::Tokens(&ids),
                &ForwardOptions::default(),
                Some(&spec),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Patch(_)), "{err}");
    }

    #[test]
    fn patch_length_mismatch_is_rejected() {
        let m = toy();
        let opts = ForwardOptions::capturing([HookPoint::mlp_out(0)]);
        let rec = m
            .forward(ModelInput::Tokens(&[1, 2, 3]), &opts, None)
            .unwrap();
        let tpl = PatchTemplate::new(vec![HookSite::all(HookPoint::mlp_out(0))]).unwrap();
        let spec = tpl.bind(&rec.cache).unwrap();
        let err = m
            .forward(
                ModelInput::Tokens(&[1, 2, 3, 4]),
                &ForwardOptions::default(),
                Some(&spec),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Patch(_)));
    }

    #[test]
    fn head_slices_come_from_fused_matrix() {
        let m = toy();
        let [q, k, v] = m.head_qkv_weights(1, 1).unwrap();
        let fused = &m.weights().blocks[1].attn.qkv;
        assert_eq!(q.get(3, 0), fused.get(3, 8));
        assert_eq!(k.get(3, 0), fused.get(3, 16 + 8));
        assert_eq!(v.get(3, 7), fused.get(3, 32 + 15));
        assert!(m.head_qkv_weights(2, 0).is_err());
    }

    #[test]
    fn attention_patterns_are_causal_distributions() {
        let m = toy();
        let opts = ForwardOptions::capturing([HookPoint::attn_pattern(1, 0)]);
        let rec = m
            .forward(ModelInput::Tokens(&[5, 6, 7, 8]), &opts, None)
            .unwrap();
        let a = rec.attn_pattern(1, 0).unwrap();
        for r in 0..4 {
            let s: f32 = a.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            for c in r + 1..4 {
                assert_eq!(a.get(r, c), 0.0);
            }
        }
        assert!(matches!(rec.attn_pattern(0, 0), Err(Error::CacheMiss(_))));
    }
}
