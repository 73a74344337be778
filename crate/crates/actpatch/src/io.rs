// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats: model config JSON, safetensors weights, GPT-2 vocabulary
//! files, paired-fact records and newline-delimited word pools.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use actpatch_core::kernels::Matrix;
use actpatch_core::model::{Attention, Block, LayerNorm, Mlp};
use actpatch_core::tasks::FactRecord;
use actpatch_core::{Model, ModelConfig, Vocab, Weights};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde_json::Value;

use crate::error::{RunError, RunResult};

pub fn read_bytes(path: &Path) -> RunResult<Vec<u8>> {
    fs::read(path).map_err(|source| RunError::Input {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_text(path: &Path) -> RunResult<String> {
    fs::read_to_string(path).map_err(|source| RunError::Input {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> RunResult<()> {
    fs::write(path, bytes).map_err(|source| RunError::Output {
        path: path.to_path_buf(),
        source,
    })
}

/// `vocab.json` (token → id) plus `merges.txt`.
pub fn load_vocab(vocab_path: &Path, merges_path: &Path) -> RunResult<Vocab> {
    let map: BTreeMap<String, u32> = serde_json::from_str(&read_text(vocab_path)?)
        .map_err(|e| RunError::format(vocab_path, e))?;
    let merges = Vocab::parse_merges(&read_text(merges_path)?)
        .map_err(|e| RunError::format(merges_path, e))?;
    Vocab::new(map, &merges).map_err(|e| RunError::format(vocab_path, e))
}

fn pick<'a>(obj: &'a serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter()
        .find_map(|k| obj.get(*k).filter(|v| !v.is_null()))
}

fn pick_usize(
    obj: &serde_json::Map<String, Value>,
    keys: &[&str],
) -> Result<Option<usize>, String> {
    match pick(obj, keys) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|n| Some(n as usize))
            .ok_or_else(|| format!("{} must be a non-negative integer", keys[0])),
    }
}

/// Parses a model config. Accepts the native field names and the Hugging
/// Face GPT-2 names (`n_layer`, `n_head`, `n_embd`, `n_inner`, `n_positions`,
/// `layer_norm_epsilon`). A missing or null `d_mlp` means `4 × d_model`.
pub fn model_config_from_json(text: &str) -> Result<ModelConfig, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let obj = value
        .as_object()
        .ok_or("model config must be a JSON object")?;
    let need = |keys: &[&str]| -> Result<usize, String> {
        pick_usize(obj, keys)?.ok_or_else(|| format!("missing {}", keys[0]))
    };
    let n_layers = need(&["n_layers", "n_layer", "num_hidden_layers"])?;
    let n_heads = need(&["n_heads", "n_head", "num_attention_heads"])?;
    let d_model = need(&["d_model", "n_embd", "hidden_size"])?;
    let vocab_size = need(&["vocab_size"])?;
    let max_positions = need(&[
        "max_positions",
        "n_positions",
        "n_ctx",
        "max_position_embeddings",
    ])?;
    let d_mlp = pick_usize(obj, &["d_mlp", "n_inner", "intermediate_size"])?.unwrap_or(4 * d_model);
    let flag = |k: &str| obj.get(k).and_then(Value::as_bool).unwrap_or(false);
    let layer_norm_eps = match pick(obj, &["layer_norm_eps", "layer_norm_epsilon"]) {
        None => actpatch_core::kernels::LAYERNORM_EPS,
        Some(v) => v.as_f64().ok_or("layer_norm_eps must be a number")? as f32,
    };
    let model_type = obj
        .get("model_type")
        .and_then(Value::as_str)
        .unwrap_or("gpt2");
    let parallel_blocks =
        flag("parallel_blocks") || model_type == "gptj" || model_type == "gpt_neox";
    if let Some(act) = obj.get("activation_function").and_then(Value::as_str) {
        if !matches!(act, "gelu_new" | "gelu_pytorch_tanh") {
            return Err(format!(
                "activation {act:?} is not supported (tanh GELU only)"
            ));
        }
    }
    let config = ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_mlp,
        vocab_size,
        max_positions,
        attn_only: flag("attn_only"),
        layer_norm_eps,
        parallel_blocks,
    };
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

pub fn load_model_config(path: &Path) -> RunResult<ModelConfig> {
    model_config_from_json(&read_text(path)?).map_err(|e| RunError::format(path, e))
}

pub fn save_model_config(path: &Path, config: &ModelConfig) -> RunResult<()> {
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    write(path, text.as_bytes())
}

fn to_f32(view: &TensorView<'_>, name: &str) -> Result<Vec<f32>, String> {
    let data = view.data();
    let out = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        other => return Err(format!("{name}: unsupported dtype {other:?}")),
    };
    Ok(out)
}

struct TensorSource<'a> {
    tensors: SafeTensors<'a>,
}

impl TensorSource<'_> {
    fn view(&self, name: &str) -> Result<TensorView<'_>, String> {
        self.tensors
            .tensor(name)
            .or_else(|_| self.tensors.tensor(&format!("transformer.{name}")))
            .map_err(|_| format!("missing tensor {name}"))
    }

    fn has(&self, name: &str) -> bool {
        self.view(name).is_ok()
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix, String> {
        let view = self.view(name)?;
        if view.shape() != [rows, cols] {
            return Err(format!(
                "{name}: expected shape [{rows}, {cols}], found {:?}",
                view.shape()
            ));
        }
        Matrix::new(rows, cols, to_f32(&view, name)?).map_err(|e| format!("{name}: {e}"))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>, String> {
        let view = self.view(name)?;
        if view.shape() != [len] {
            return Err(format!(
                "{name}: expected shape [{len}], found {:?}",
                view.shape()
            ));
        }
        to_f32(&view, name)
    }

    fn layer_norm(&self, prefix: &str, d: usize) -> Result<LayerNorm, String> {
        Ok(LayerNorm {
            gamma: self.vector(&format!("{prefix}.weight"), d)?,
            beta: self.vector(&format!("{prefix}.bias"), d)?,
        })
    }
}

/// Reads GPT-2-named tensors (`wte.weight`, `h.{i}.attn.c_attn.weight`, ...),
/// with or without a `transformer.` prefix. Conv1D layout (`in × out`) is
/// expected, so the fused `c_attn` matrix is `d × 3d`.
pub fn weights_from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<Weights, String> {
    let tensors =
        SafeTensors::deserialize(bytes).map_err(|e| format!("not a safetensors file: {e}"))?;
    let src = TensorSource { tensors };
    let (d, v, f) = (config.d_model, config.vocab_size, config.d_mlp);
    let token_embedding = src.matrix("wte.weight", v, d)?;
    let position_embedding = src.matrix("wpe.weight", config.max_positions, d)?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = format!("h.{i}");
        let attn = Attention {
            qkv: src.matrix(&format!("{p}.attn.c_attn.weight"), d, 3 * d)?,
            qkv_bias: src.vector(&format!("{p}.attn.c_attn.bias"), 3 * d)?,
            out: src.matrix(&format!("{p}.attn.c_proj.weight"), d, d)?,
            out_bias: src.vector(&format!("{p}.attn.c_proj.bias"), d)?,
        };
        let (ln2, mlp) = if config.attn_only {
            if src.has(&format!("{p}.mlp.c_fc.weight")) {
                return Err(format!(
                    "{p}: attention-only config but checkpoint has MLP weights"
                ));
            }
            (None, None)
        } else {
            let mlp = Mlp {
                fc: src.matrix(&format!("{p}.mlp.c_fc.weight"), d, f)?,
                fc_bias: src.vector(&format!("{p}.mlp.c_fc.bias"), f)?,
                proj: src.matrix(&format!("{p}.mlp.c_proj.weight"), f, d)?,
                proj_bias: src.vector(&format!("{p}.mlp.c_proj.bias"), d)?,
            };
            (Some(src.layer_norm(&format!("{p}.ln_2"), d)?), Some(mlp))
        };
        blocks.push(Block {
            ln1: src.layer_norm(&format!("{p}.ln_1"), d)?,
            attn,
            ln2,
            mlp,
        });
    }
    let final_ln = src.layer_norm("ln_f", d)?;
    let unembedding = match src.tensors.tensor("lm_head.weight") {
        Ok(_) => {
            let u = src.matrix("lm_head.weight", v, d)?;
            (u != token_embedding).then_some(u)
        }
        Err(_) => None,
    };
    Ok(Weights {
        token_embedding,
        position_embedding,
        blocks,
        final_ln,
        unembedding,
    })
}

pub fn load_weights(path: &Path, config: &ModelConfig) -> RunResult<Weights> {
    let bytes = read_bytes(path)?;
    weights_from_bytes(&bytes, config).map_err(|e| RunError::format(path, e))
}

pub fn load_model(config_path: &Path, weights_path: &Path) -> RunResult<Model> {
    let config = load_model_config(config_path)?;
    let weights = load_weights(weights_path, &config)?;
    Model::new(config, weights).map_err(|e| RunError::format(weights_path, e))
}

fn le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serialises weights with the same names [`weights_from_bytes`] reads.
pub fn weights_to_bytes(config: &ModelConfig, weights: &Weights) -> Vec<u8> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut mat = |name: String, m: &Matrix| {
        owned.push((name, vec![m.rows(), m.cols()], le_bytes(m.as_slice())))
    };
    mat("wte.weight".into(), &weights.token_embedding);
    mat("wpe.weight".into(), &weights.position_embedding);
    for (i, b) in weights.blocks.iter().enumerate() {
        mat(format!("h.{i}.attn.c_attn.weight"), &b.attn.qkv);
        mat(format!("h.{i}.attn.c_proj.weight"), &b.attn.out);
        if let Some(mlp) = &b.mlp {
            mat(format!("h.{i}.mlp.c_fc.weight"), &mlp.fc);
            mat(format!("h.{i}.mlp.c_proj.weight"), &mlp.proj);
        }
    }
    if let Some(u) = &weights.unembedding {
        mat("lm_head.weight".into(), u);
    }
    let mut vector = |name: String, v: &[f32]| owned.push((name, vec![v.len()], le_bytes(v)));
    for (i, b) in weights.blocks.iter().enumerate() {
        vector(format!("h.{i}.ln_1.weight"), &b.ln1.gamma);
        vector(format!("h.{i}.ln_1.bias"), &b.ln1.beta);
        vector(format!("h.{i}.attn.c_attn.bias"), &b.attn.qkv_bias);
        vector(format!("h.{i}.attn.c_proj.bias"), &b.attn.out_bias);
        if let (Some(ln2), Some(mlp)) = (&b.ln2, &b.mlp) {
            vector(format!("h.{i}.ln_2.weight"), &ln2.gamma);
            vector(format!("h.{i}.ln_2.bias"), &ln2.beta);
            vector(format!("h.{i}.mlp.c_fc.bias"), &mlp.fc_bias);
            vector(format!("h.{i}.mlp.c_proj.bias"), &mlp.proj_bias);
        }
    }
    vector("ln_f.weight".into(), &weights.final_ln.gamma);
    vector("ln_f.bias".into(), &weights.final_ln.beta);
    let views: Vec<(String, TensorView<'_>)> = owned
        .iter()
        .map(|(n, shape, data)| {
            (
                n.clone(),
                TensorView::new(Dtype::F32, shape.clone(), data).expect("consistent view"),
            )
        })
        .collect();
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), "pt".to_string());
    meta.insert("n_layers".to_string(), config.n_layers.to_string());
    safetensors::serialize(views, &Some(meta)).expect("serialize in memory")
}

pub fn save_weights(path: &Path, config: &ModelConfig, weights: &Weights) -> RunResult<()> {
    write(path, &weights_to_bytes(config, weights))
}

/// Paired-fact records: a JSON array of `{pair, answer, length, category}`.
pub fn load_fact_records(path: &Path) -> RunResult<Vec<FactRecord>> {
    serde_json::from_str(&read_text(path)?).map_err(|e| RunError::format(path, e))
}

/// One entry per line; blank lines and `#` comments are skipped.
pub fn parse_pool(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn load_pool(path: &Path) -> RunResult<Vec<String>> {
    let pool = parse_pool(&read_text(path)?);
    if pool.is_empty() {
        return Err(RunError::format(path, "pool file has no entries"));
    }
    Ok(pool)
}
