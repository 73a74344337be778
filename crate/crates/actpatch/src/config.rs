// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: a JSON document naming the model files, the
//! task, the corruption, the metrics and the sweep.

use std::path::{Path, PathBuf};

use actpatch_core::corruption::{Answer, CorruptionMethod, CorruptionSpec};
use actpatch_core::metrics::MetricKind;
use actpatch_core::tasks::Operator;
use actpatch_core::SpanLabel;
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    /// Model config JSON (native or Hugging Face GPT-2 names).
    pub config: PathBuf,
    /// Safetensors checkpoint.
    pub weights: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
}

impl ModelPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.config,
            &mut self.weights,
            &mut self.vocab,
            &mut self.merges,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Task generator selection. Omitted word lists fall back to the built-in
/// ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Ioi {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        templates: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        names: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        places: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        objects: Option<Vec<String>>,
    },
    /// Paired-fact records in a JSON file.
    Facts {
        path: PathBuf,
    },
    GreaterThan {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nouns: Option<Vec<String>>,
    },
    Docstring {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        words: Option<Vec<String>>,
    },
    Arithmetic {
        operator: Operator,
    },
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Ioi { .. } => "ioi",
            TaskConfig::Facts { .. } => "facts",
            TaskConfig::GreaterThan { .. } => "greater_than",
            TaskConfig::Docstring { .. } => "docstring",
            TaskConfig::Arithmetic { .. } => "arithmetic",
        }
    }

    /// `None` means every usable record.
    pub fn default_prompts(&self) -> Option<usize> {
        match self {
            TaskConfig::Ioi { .. } => Some(500),
            TaskConfig::GreaterThan { .. } => Some(300),
            TaskConfig::Docstring { .. } | TaskConfig::Arithmetic { .. } => Some(200),
            TaskConfig::Facts { .. } => None,
        }
    }

    /// An answer of the shape this task produces, for metric checks.
    fn sample_answer(&self) -> Answer {
        match self {
            TaskConfig::GreaterThan { .. } => Answer::Sets {
                greater: vec![1],
                less: vec![0],
            },
            _ => Answer::Pair {
                correct: 0,
                incorrect: 1,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Every head's output at all positions.
    HeadsAllPos,
    /// Every head at every position (prompts must share one length).
    HeadsByPos,
    /// MLP windows at the last subject token.
    MlpLastSubject,
    /// MLP windows at all positions jointly.
    MlpAllPos,
    /// MLP windows at the final token.
    MlpLastToken,
    /// MLP windows at each position separately (prompts must share one length).
    MlpByPos,
}

impl SweepKind {
    pub fn is_heads(self) -> bool {
        matches!(self, SweepKind::HeadsAllPos | SweepKind::HeadsByPos)
    }

    pub fn by_position(self) -> bool {
        matches!(self, SweepKind::HeadsByPos | SweepKind::MlpByPos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Restore every layer of the window in one patched run.
    #[default]
    JointWindow,
    /// Patch layers one at a time and sum over the window.
    SumSingle,
}

fn one() -> usize {
    1
}

fn default_batch() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelPaths,
    pub task: TaskConfig,
    pub corruption: CorruptionSpec,
    pub metrics: Vec<MetricKind>,
    pub sweep: SweepKind,
    #[serde(default = "one")]
    pub window: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub n_prompts: Option<usize>,
    /// Seed for prompt generation. Corruption noise uses `corruption.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Keep only prompts whose clean top-1 prediction is the correct answer.
    #[serde(default)]
    pub filter_correct: bool,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths are taken from `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, String> {
        let mut config: ExperimentConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        config.model.resolve(base);
        if let TaskConfig::Facts { path } = &mut config.task {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> RunResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| RunError::Input {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
    }

    pub fn prompt_count(&self) -> Option<usize> {
        self.n_prompts.or(self.task.default_prompts())
    }

    /// Checks that don't need the model. Depth-dependent checks happen at run
    /// time.
    pub fn validate(&self) -> Result<(), String> {
        self.corruption.validate().map_err(|e| e.to_string())?;
        if self.metrics.is_empty() {
            return Err("at least one metric is required".into());
        }
        let sample = self.task.sample_answer();
        for m in &self.metrics {
            if !m.applies_to(&sample) {
                return Err(format!(
                    "metric {} does not apply to task {}",
                    m.as_str(),
                    self.task.name()
                ));
            }
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.n_prompts == Some(0) {
            return Err("n_prompts must be at least 1".into());
        }
        if self.window == 0 {
            return Err("window must be at least 1".into());
        }
        if self.sweep.is_heads() {
            if self.window != 1 {
                return Err("head sweeps take window 1".into());
            }
            if self.aggregation == Aggregation::SumSingle {
                return Err("sum_single aggregation applies to MLP sweeps only".into());
            }
        }
        if self.sweep == SweepKind::MlpLastSubject && !matches!(self.task, TaskConfig::Facts { .. })
        {
            return Err("mlp_last_subject needs a task with a subject span (facts)".into());
        }
        if self.filter_correct && matches!(self.task, TaskConfig::GreaterThan { .. }) {
            return Err(
                "filter_correct needs a single correct answer; greater_than has answer sets".into(),
            );
        }
        if self.corruption.method == CorruptionMethod::Abc
            && !matches!(self.task, TaskConfig::Ioi { .. })
        {
            return Err("ABC corruption is defined for the ioi task only".into());
        }
        let allowed: &[SpanLabel] = match self.task {
            TaskConfig::Ioi { .. } => &[SpanLabel::S1, SpanLabel::S2, SpanLabel::Io],
            TaskConfig::Facts { .. } => &[SpanLabel::Subject],
            TaskConfig::GreaterThan { .. } => &[SpanLabel::Yy],
            TaskConfig::Docstring { .. } => &[SpanLabel::CDef],
            TaskConfig::Arithmetic { .. } => &[SpanLabel::X3, SpanLabel::Y3],
        };
        if let Some(t) = self
            .corruption
            .targets
            .iter()
            .find(|t| !allowed.contains(t))
        {
            return Err(format!(
                "task {} has no {t} span to corrupt",
                self.task.name()
            ));
        }
        Ok(())
    }
}
