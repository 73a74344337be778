// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sweeps over patch targets and the end-to-end experiment pipeline.
//!
//! For each prompt batch the clean and corrupted runs happen once. Every
//! target then costs one patched run per prompt, spread over a thread pool.
//! Results are folded into the accumulator in (target, prompt) order, so the
//! output does not depend on the thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use actpatch_core::corruption::{name_tokens, CorruptionMethod, PromptPair};
use actpatch_core::intervention::{baseline_runs, patched_runs_each};
use actpatch_core::metrics::{
    sum_windows, window_range, Detection, EffectAccumulator, EffectMatrix, MetricKind, PatchTarget,
    Reference,
};
use actpatch_core::tasks::{
    build_pairs, fact_prompts, filter_model_correct, gen_arithmetic, gen_docstring,
    gen_greater_than, gen_ioi, ArithmeticSpec, DocstringSpec, GreaterThanSpec, IoiSpec, Rejection,
    TaskPrompt, IOI_NAMES,
};
use actpatch_core::{
    HookPoint, HookSite, Model, ModelConfig, PatchTemplate, Positions, SpanLabel, Vocab,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Aggregation, ExperimentConfig, SweepKind, TaskConfig};
use crate::error::{RunError, RunResult};
use crate::{io, report};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "ACTPATCH_THREADS";

fn thread_pool() -> RunResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| {
            RunError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))
}

/// Length shared by every prompt, required for per-position sweeps.
pub fn common_length(pairs: &[PromptPair]) -> RunResult<usize> {
    let n = pairs
        .first()
        .map(|p| p.clean.len())
        .ok_or_else(|| RunError::Config("no prompts".into()))?;
    if let Some(p) = pairs.iter().find(|p| p.clean.len() != n) {
        return Err(RunError::Config(format!(
            "per-position sweeps need equal-length prompts, found {n} and {} tokens",
            p.clean.len()
        )));
    }
    Ok(n)
}

/// Rows of a sweep, in output order.
pub fn sweep_targets(
    kind: SweepKind,
    window: usize,
    config: &ModelConfig,
    seq_len: Option<usize>,
) -> Vec<PatchTarget> {
    let (l, h) = (config.n_layers, config.n_heads);
    let n = seq_len.unwrap_or(0);
    match kind {
        SweepKind::HeadsAllPos => (0..l)
            .flat_map(|a| (0..h).map(move |b| PatchTarget::head(a, b)))
            .collect(),
        SweepKind::HeadsByPos => (0..l)
            .flat_map(|a| {
                (0..h).flat_map(move |b| (0..n).map(move |p| PatchTarget::head_at(a, b, p)))
            })
            .collect(),
        SweepKind::MlpByPos => (0..l)
            .flat_map(|a| (0..n).map(move |p| PatchTarget::mlp_at(a, p, window)))
            .collect(),
        SweepKind::MlpLastSubject | SweepKind::MlpAllPos | SweepKind::MlpLastToken => {
            (0..l).map(|a| PatchTarget::mlp(a, window)).collect()
        }
    }
}

/// Sites patched for `target` on one prompt.
pub fn target_template(
    kind: SweepKind,
    target: &PatchTarget,
    pair: &PromptPair,
    n_layers: usize,
) -> RunResult<PatchTemplate> {
    let positions = match (kind, target.position) {
        (_, Some(p)) => Positions::only([p]),
        (SweepKind::MlpLastSubject, None) => {
            Positions::only([pair.clean.span(SpanLabel::Subject)?.last()])
        }
        (SweepKind::MlpLastToken, None) => Positions::only([pair.clean.len() - 1]),
        _ => Positions::All,
    };
    let sites = match target.head {
        Some(h) => vec![HookSite {
            point: HookPoint::head_out(target.layer, h),
            positions,
        }],
        None => window_range(target.layer, target.window, n_layers)
            .map(|k| HookSite {
                point: HookPoint::mlp_out(k),
                positions: positions.clone(),
            })
            .collect(),
    };
    Ok(PatchTemplate::new(sites)?)
}

/// Runs every target over every pair and averages each metric per target.
/// Metric failures on a prompt (e.g. a vanishing normaliser) exclude that
/// prompt for that cell; forward-pass failures abort the sweep.
pub fn sweep(
    model: &Model,
    pairs: &[PromptPair],
    kind: SweepKind,
    targets: &[PatchTarget],
    metrics: &[MetricKind],
    batch_size: usize,
) -> RunResult<EffectMatrix> {
    let n_layers = model.config().n_layers;
    let pool = thread_pool()?;
    let mut acc = EffectAccumulator::new(targets.to_vec(), metrics.to_vec());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&PromptPair> = chunk.iter().collect();
        let templates: Vec<Vec<PatchTemplate>> = targets
            .iter()
            .map(|t| {
                chunk
                    .iter()
                    .map(|p| target_template(kind, t, p, n_layers))
                    .collect()
            })
            .collect::<RunResult<_>>()?;
        let capture: BTreeSet<HookPoint> = templates
            .iter()
            .flatten()
            .flat_map(|t| t.points())
            .collect();
        let baselines = baseline_runs(model, &refs, &capture)?;
        let references: Vec<Reference<'_>> = (0..chunk.len())
            .map(|i| {
                Reference::new(
                    baselines.clean[i].final_logits(),
                    baselines.corrupted[i].final_logits(),
                )
            })
            .collect();
        let results: Vec<Vec<Vec<actpatch_core::Result<f64>>>> = pool.install(|| {
            templates
                .par_iter()
                .map(|per_pair| {
                    let trefs: Vec<&PatchTemplate> = per_pair.iter().collect();
                    let patched = patched_runs_each(model, &refs, &baselines, &trefs)?;
                    Ok(patched
                        .iter()
                        .enumerate()
                        .map(|(i, rec)| {
                            references[i].evaluate(metrics, rec.final_logits(), &chunk[i].answer)
                        })
                        .collect())
                })
                .collect::<actpatch_core::Result<_>>()
        })?;
        for (t, per_prompt) in results.into_iter().enumerate() {
            for values in per_prompt {
                for (m, v) in values.into_iter().enumerate() {
                    acc.record(t, m, v);
                }
            }
        }
        acc.add_prompts(chunk.len());
    }
    Ok(acc.finish())
}

/// Every head's output at all positions: `L × H` rows.
pub fn sweep_heads(
    model: &Model,
    pairs: &[PromptPair],
    metrics: &[MetricKind],
    batch: usize,
) -> RunResult<EffectMatrix> {
    let targets = sweep_targets(SweepKind::HeadsAllPos, 1, model.config(), None);
    sweep(
        model,
        pairs,
        SweepKind::HeadsAllPos,
        &targets,
        metrics,
        batch,
    )
}

/// Every head at every position: `L × H × n` rows.
pub fn sweep_heads_by_position(
    model: &Model,
    pairs: &[PromptPair],
    metrics: &[MetricKind],
    batch: usize,
) -> RunResult<EffectMatrix> {
    let n = common_length(pairs)?;
    let targets = sweep_targets(SweepKind::HeadsByPos, 1, model.config(), Some(n));
    sweep(
        model,
        pairs,
        SweepKind::HeadsByPos,
        &targets,
        metrics,
        batch,
    )
}

/// Jointly restores the MLP outputs of a window of layers centred at each
/// layer, at the positions `kind` selects.
pub fn sweep_mlp_window(
    model: &Model,
    pairs: &[PromptPair],
    kind: SweepKind,
    window: usize,
    metrics: &[MetricKind],
    batch: usize,
) -> RunResult<EffectMatrix> {
    if kind.is_heads() {
        return Err(RunError::Config(
            "MLP window sweep needs an MLP sweep kind".into(),
        ));
    }
    if model.config().attn_only {
        return Err(RunError::Config("model has no MLP layers".into()));
    }
    if window == 0 || window > model.config().n_layers {
        return Err(RunError::Config(format!(
            "window {window} outside 1..={}",
            model.config().n_layers
        )));
    }
    let n = if kind.by_position() {
        Some(common_length(pairs)?)
    } else {
        None
    };
    let targets = sweep_targets(kind, window, model.config(), n);
    sweep(model, pairs, kind, &targets, metrics, batch)
}

/// Single-layer MLP effects summed over each window.
pub fn aggregate_sum_single(
    model: &Model,
    pairs: &[PromptPair],
    kind: SweepKind,
    window: usize,
    metrics: &[MetricKind],
    batch: usize,
) -> RunResult<EffectMatrix> {
    let single = sweep_mlp_window(model, pairs, kind, 1, metrics, batch)?;
    Ok(sum_windows(&single, window, model.config().n_layers)?)
}

/// Loaded model plus the corrupted prompt pairs of an experiment.
pub struct Prepared {
    pub model: Model,
    pub vocab: Vocab,
    pub pairs: Vec<PromptPair>,
    pub noise_scale: f64,
    pub generated: usize,
    pub rejected: Vec<Rejection>,
    pub filtered_out: usize,
}

/// Clean prompts for the configured task, before filtering.
pub fn task_prompts(
    config: &ExperimentConfig,
    vocab: &Vocab,
) -> RunResult<(Vec<TaskPrompt>, Vec<Rejection>)> {
    let n = config.prompt_count();
    let seed = config.seed;
    let count = n.unwrap_or(0);
    let prompts = match &config.task {
        TaskConfig::Ioi {
            templates,
            names,
            places,
            objects,
        } => {
            let mut spec = IoiSpec::with_defaults(count, seed);
            for (dst, src) in [
                (&mut spec.templates, templates),
                (&mut spec.names, names),
                (&mut spec.places, places),
                (&mut spec.objects, objects),
            ] {
                if let Some(v) = src {
                    *dst = v.clone();
                }
            }
            let targets: &[SpanLabel] = if config.corruption.method == CorruptionMethod::Str {
                &config.corruption.targets
            } else {
                &[SpanLabel::S2]
            };
            gen_ioi(&spec, vocab, targets)?
        }
        TaskConfig::Facts { path } => {
            let records = io::load_fact_records(path)?;
            let (mut prompts, rejected) = fact_prompts(&records, vocab);
            if let Some(n) = n {
                prompts.truncate(n);
            }
            return Ok((prompts, rejected));
        }
        TaskConfig::GreaterThan { nouns } => {
            let mut spec = GreaterThanSpec::with_defaults(count, seed);
            if let Some(v) = nouns {
                spec.nouns = v.clone();
            }
            gen_greater_than(&spec, vocab)?
        }
        TaskConfig::Docstring { words } => {
            let mut spec = DocstringSpec::with_defaults(count, seed);
            if let Some(v) = words {
                spec.words = v.clone();
            }
            gen_docstring(&spec, vocab)?
        }
        TaskConfig::Arithmetic { operator } => gen_arithmetic(
            &ArithmeticSpec {
                operator: *operator,
                n_prompts: count,
                seed,
            },
            vocab,
        )?,
    };
    Ok((prompts, Vec::new()))
}

/// Loads everything and builds the corrupted pairs; no patched runs.
pub fn prepare(config: &ExperimentConfig) -> RunResult<Prepared> {
    let vocab = io::load_vocab(&config.model.vocab, &config.model.merges)?;
    let model = io::load_model(&config.model.config, &config.model.weights)?;
    if vocab.len() > model.config().vocab_size {
        return Err(RunError::Config(format!(
            "tokenizer has {} entries but the model only {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let (prompts, rejected) = task_prompts(config, &vocab)?;
    for r in &rejected {
        eprintln!("skipping record {}: {}", r.index, r.reason);
    }
    let generated = prompts.len();
    let prompts = if config.filter_correct {
        filter_model_correct(&model, prompts, config.batch_size)?
    } else {
        prompts
    };
    let filtered_out = generated - prompts.len();
    if prompts.is_empty() {
        return Err(RunError::Config(
            "no usable prompts after generation and filtering".into(),
        ));
    }
    let pool_words: Vec<String> = match (&config.corruption.replacement_pool, &config.task) {
        (Some(pool), _) => pool.clone(),
        (
            None,
            TaskConfig::Ioi {
                names: Some(names), ..
            },
        ) => names.clone(),
        _ => IOI_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let abc_pool = name_tokens(&vocab, &pool_words);
    let built = build_pairs(&model, &vocab, &prompts, &config.corruption, &abc_pool)?;
    Ok(Prepared {
        model,
        vocab,
        pairs: built.pairs,
        noise_scale: built.nu,
        generated,
        rejected,
        filtered_out,
    })
}

/// The configured sweep with its aggregation.
pub fn execute(config: &ExperimentConfig, prepared: &Prepared) -> RunResult<EffectMatrix> {
    let (model, pairs) = (&prepared.model, prepared.pairs.as_slice());
    let (metrics, batch) = (config.metrics.as_slice(), config.batch_size);
    match config.sweep {
        SweepKind::HeadsAllPos => sweep_heads(model, pairs, metrics, batch),
        SweepKind::HeadsByPos => sweep_heads_by_position(model, pairs, metrics, batch),
        kind => match config.aggregation {
            Aggregation::JointWindow => {
                sweep_mlp_window(model, pairs, kind, config.window, metrics, batch)
            }
            Aggregation::SumSingle => {
                aggregate_sum_single(model, pairs, kind, config.window, metrics, batch)
            }
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PromptCounts {
    pub generated: usize,
    pub rejected_records: usize,
    pub filtered_out: usize,
    pub used: usize,
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub noise_scale: f64,
    pub task_seed: u64,
    pub corruption_seed: u64,
    pub prompts: PromptCounts,
    pub targets: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub wall_clock_seconds: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EFFECTS_FILE: &str = "effects.csv";
pub const DETECTIONS_FILE: &str = "detections.json";

pub fn heatmap_file(metric: MetricKind) -> String {
    format!("heatmap_{}.svg", metric.as_str())
}

/// Result of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub matrix: EffectMatrix,
    pub detections: Vec<Detection>,
    pub files: Vec<PathBuf>,
}

/// Writes `files` into a staging directory next to `dir`, then moves them in.
/// On failure nothing is left behind.
pub fn write_atomically(dir: &Path, files: &[(String, Vec<u8>)]) -> RunResult<Vec<PathBuf>> {
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    let out_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RunError::Output { path, source }
    };
    let result = (|| {
        fs::create_dir_all(&staging).map_err(out_err(&staging))?;
        for (file, bytes) in files {
            let p = staging.join(file);
            fs::write(&p, bytes).map_err(out_err(&p))?;
        }
        fs::create_dir_all(dir).map_err(out_err(dir))?;
        let mut written = Vec::with_capacity(files.len());
        for (file, _) in files {
            let to = dir.join(file);
            fs::rename(staging.join(file), &to).map_err(out_err(&to))?;
            written.push(to);
        }
        Ok(written)
    })();
    let _ = fs::remove_dir_all(&staging);
    result
}

pub fn run_config(config: &ExperimentConfig) -> RunResult<RunOutcome> {
    let started = Instant::now();
    let prepared = prepare(config)?;
    let matrix = execute(config, &prepared)?;
    let detections = report::detections(&matrix);
    let metrics = matrix
        .metrics
        .iter()
        .zip(&matrix.excluded)
        .map(|(&m, &excluded)| {
            let (mean, sd) = matrix.stats(m).expect("metric column");
            (m.as_str().to_string(), MetricSummary { mean, sd, excluded })
        })
        .collect();
    let manifest = RunManifest {
        version: concat!("actpatch ", env!("CARGO_PKG_VERSION")).to_string(),
        config: config.clone(),
        model: prepared.model.config().clone(),
        noise_scale: prepared.noise_scale,
        task_seed: config.seed,
        corruption_seed: config.corruption.seed,
        prompts: PromptCounts {
            generated: prepared.generated,
            rejected_records: prepared.rejected.len(),
            filtered_out: prepared.filtered_out,
            used: prepared.pairs.len(),
        },
        targets: matrix.targets.len(),
        metrics,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let mut files = vec![
        (
            MANIFEST_FILE.to_string(),
            serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
        ),
        (
            EFFECTS_FILE.to_string(),
            report::effects_csv(&matrix).into_bytes(),
        ),
        (
            DETECTIONS_FILE.to_string(),
            report::detections_json(&detections).into_bytes(),
        ),
    ];
    for &m in &matrix.metrics {
        let title = format!(
            "{} / {} / {}",
            config.task.name(),
            config.corruption.method.as_str(),
            m.as_str()
        );
        let svg = report::heatmap_svg(&matrix, m, &title).map_err(RunError::Config)?;
        files.push((heatmap_file(m), svg.into_bytes()));
    }
    let files = write_atomically(&config.output_dir, &files)?;
    Ok(RunOutcome {
        manifest,
        matrix,
        detections,
        files,
    })
}

/// Loads, validates and runs the config at `path`.
pub fn run(path: &Path) -> RunResult<RunOutcome> {
    run_config(&ExperimentConfig::load(path)?)
}
