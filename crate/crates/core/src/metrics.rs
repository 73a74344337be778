// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patching effects, aggregation across prompts and the 2-SD detection rule.
//!
//! All effects compare the patched run against the corrupted baseline at the
//! final position. Probabilities come from an f64 log-softmax.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use crate::corruption::Answer;
use crate::error::{Error, Result};
use crate::math;

/// Guard on `|LD_cl - LD_*|` before normalising.
pub const EPS_NORM: f64 = 1e-6;
/// Guard on the denominators of the relative-probability metric.
pub const EPS_DIV: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MetricKind {
    Prob,
    LogitDiffNorm,
    Kl,
    StolfoRel,
    AnswerSetProb,
    AnswerSetLogitDiff,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Prob,
        MetricKind::LogitDiffNorm,
        MetricKind::Kl,
        MetricKind::StolfoRel,
        MetricKind::AnswerSetProb,
        MetricKind::AnswerSetLogitDiff,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            MetricKind::Prob => "prob",
            MetricKind::LogitDiffNorm => "logit_diff_norm",
            MetricKind::Kl => "kl",
            MetricKind::StolfoRel => "stolfo_rel",
            MetricKind::AnswerSetProb => "answer_set_prob",
            MetricKind::AnswerSetLogitDiff => "answer_set_logit_diff",
        }
    }

    /// Effect of one prompt's triple under this metric.
    pub fn evaluate(self, logits: &RunLogits<'_>, answer: &Answer) -> Result<f64> {
        match (self, answer) {
            (MetricKind::Kl, _) => Ok(effect_kl(logits)),
            (MetricKind::Prob, Answer::Pair { correct, .. }) => Ok(effect_prob(logits, *correct)),
            (MetricKind::LogitDiffNorm, Answer::Pair { correct, incorrect }) => {
                effect_logit_diff(logits, *correct, *incorrect)
            }
            (MetricKind::StolfoRel, Answer::Pair { correct, incorrect }) => {
                effect_stolfo(logits, *correct, *incorrect)
            }
            (MetricKind::AnswerSetProb, Answer::Sets { greater, less }) => {
                effect_answer_set(logits, greater, less, AnswerSetVariant::Prob)
            }
            (MetricKind::AnswerSetLogitDiff, Answer::Sets { greater, less }) => {
                effect_answer_set(logits, greater, less, AnswerSetVariant::LogitDiff)
            }
            (m, _) => Err(Error::Config(format!(
                "metric {m} does not apply to this answer type"
            ))),
        }
    }

    /// Whether this metric can be evaluated on the given answer type.
    pub fn applies_to(self, answer: &Answer) -> bool {
        matches!(
            (self, answer),
            (MetricKind::Kl, _)
                | (
                    MetricKind::Prob | MetricKind::LogitDiffNorm | MetricKind::StolfoRel,
                    Answer::Pair { .. }
                )
                | (
                    MetricKind::AnswerSetProb | MetricKind::AnswerSetLogitDiff,
                    Answer::Sets { .. }
                )
        )
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// Final-position logits of the three runs.
#[derive(Debug, Clone, Copy)]
pub struct RunLogits<'a> {
    pub clean: &'a [f32],
    pub corrupted: &'a [f32],
    pub patched: &'a [f32],
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let sum: f64 = logits.iter().map(|&v| math::exp(f64::from(v) - max)).sum();
    let log_z = max + math::ln(sum);
    logits.iter().map(|&v| f64::from(v) - log_z).collect()
}

pub fn prob(logits: &[f32], token: u32) -> f64 {
    math::exp(log_softmax(logits)[token as usize])
}

/// `Logit(r) - Logit(r')`.
pub fn logit_diff(logits: &[f32], r: u32, r_prime: u32) -> f64 {
    f64::from(logits[r as usize]) - f64::from(logits[r_prime as usize])
}

/// `D_KL(P ‖ Q)` over the full vocabulary.
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    kl_from_log_probs(&log_softmax(p_logits), &log_softmax(q_logits))
}

fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> f64 {
    let kl: f64 = lp
        .iter()
        .zip(lq)
        .map(|(&a, &b)| math::exp(a) * (a - b))
        .sum();
    kl.max(0.0)
}

/// `P_pt(r) - P_*(r)`.
pub fn effect_prob(l: &RunLogits<'_>, r: u32) -> f64 {
    prob(l.patched, r) - prob(l.corrupted, r)
}

/// `(pt - star) / (clean - star)` with the degenerate-gap guard.
pub fn normalize(patched: f64, corrupted: f64, clean: f64) -> Result<f64> {
    let gap = clean - corrupted;
    if gap.abs() <= EPS_NORM {
        return Err(Error::DegenerateNormalization { gap, eps: EPS_NORM });
    }
    Ok((patched - corrupted) / gap)
}

/// Normalised logit difference: 1 is full restoration, 0 the corrupted baseline.
pub fn effect_logit_diff(l: &RunLogits<'_>, r: u32, r_prime: u32) -> Result<f64> {
    normalize(
        logit_diff(l.patched, r, r_prime),
        logit_diff(l.corrupted, r, r_prime),
        logit_diff(l.clean, r, r_prime),
    )
}

/// `D_KL(P_cl ‖ P_*) - D_KL(P_cl ‖ P_pt)`.
pub fn effect_kl(l: &RunLogits<'_>) -> f64 {
    kl_divergence(l.clean, l.corrupted) - kl_divergence(l.clean, l.patched)
}

/// `½[(P_pt(r) - P_*(r)) / P_*(r) + (P_*(r') - P_pt(r')) / P_pt(r')]`.
pub fn effect_stolfo(l: &RunLogits<'_>, r: u32, r_prime: u32) -> Result<f64> {
    stolfo_from_log_probs(
        &log_softmax(l.patched),
        &log_softmax(l.corrupted),
        r,
        r_prime,
    )
}

fn stolfo_from_log_probs(pt: &[f64], star: &[f64], r: u32, r_prime: u32) -> Result<f64> {
    let (pt_r, star_r) = (math::exp(pt[r as usize]), math::exp(star[r as usize]));
    let (pt_rp, star_rp) = (
        math::exp(pt[r_prime as usize]),
        math::exp(star[r_prime as usize]),
    );
    for d in [star_r, pt_rp] {
        if d <= EPS_DIV {
            return Err(Error::DivergentMetric {
                denominator: d,
                eps: EPS_DIV,
            });
        }
    }
    Ok(0.5 * ((pt_r - star_r) / star_r + (star_rp - pt_rp) / pt_rp))
}

/// Clean and corrupted log-probabilities of one prompt, computed once and
/// reused across every patch target. [`Reference::evaluate`] returns the same
/// bits as [`MetricKind::evaluate`].
#[derive(Debug, Clone)]
pub struct Reference<'a> {
    clean: &'a [f32],
    corrupted: &'a [f32],
    clean_lp: Vec<f64>,
    corrupted_lp: Vec<f64>,
    kl_clean_corrupted: f64,
}

impl<'a> Reference<'a> {
    pub fn new(clean: &'a [f32], corrupted: &'a [f32]) -> Self {
        let clean_lp = log_softmax(clean);
        let corrupted_lp = log_softmax(corrupted);
        let kl_clean_corrupted = kl_from_log_probs(&clean_lp, &corrupted_lp);
        Self {
            clean,
            corrupted,
            clean_lp,
            corrupted_lp,
            kl_clean_corrupted,
        }
    }

    /// Every metric for one patched run, sharing a single log-softmax.
    pub fn evaluate(
        &self,
        metrics: &[MetricKind],
        patched: &[f32],
        answer: &Answer,
    ) -> Vec<Result<f64>> {
        let needs_lp = metrics.iter().any(|m| {
            matches!(
                m,
                MetricKind::Prob
                    | MetricKind::Kl
                    | MetricKind::StolfoRel
                    | MetricKind::AnswerSetProb
            )
        });
        let patched_lp = if needs_lp {
            log_softmax(patched)
        } else {
            Vec::new()
        };
        let p = |lp: &[f64], t: u32| math::exp(lp[t as usize]);
        let logits = RunLogits {
            clean: self.clean,
            corrupted: self.corrupted,
            patched,
        };
        metrics
            .iter()
            .map(|&m| match (m, answer) {
                (MetricKind::Kl, _) => {
                    Ok(self.kl_clean_corrupted - kl_from_log_probs(&self.clean_lp, &patched_lp))
                }
                (MetricKind::Prob, Answer::Pair { correct, .. }) => {
                    Ok(p(&patched_lp, *correct) - p(&self.corrupted_lp, *correct))
                }
                (MetricKind::StolfoRel, Answer::Pair { correct, incorrect }) => {
                    stolfo_from_log_probs(&patched_lp, &self.corrupted_lp, *correct, *incorrect)
                }
                (MetricKind::AnswerSetProb, Answer::Sets { greater, less }) => {
                    check_sets(greater, less)?;
                    let sum = |lp: &[f64]| greater.iter().map(|&t| p(lp, t)).sum::<f64>();
                    Ok(sum(&patched_lp) - sum(&self.corrupted_lp))
                }
                _ => m.evaluate(&logits, answer),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerSetVariant {
    /// `Σ_{y>YY} P(y)`, patched minus corrupted.
    Prob,
    /// `Σ logits(>YY) - Σ logits(<YY)`, normalised like the logit difference.
    LogitDiff,
}

fn check_sets(greater: &[u32], less: &[u32]) -> Result<()> {
    if greater.is_empty() || less.is_empty() {
        return Err(Error::Config("answer sets must be non-empty".into()));
    }
    if greater.iter().any(|g| less.contains(g)) {
        return Err(Error::Config("answer sets must be disjoint".into()));
    }
    Ok(())
}

fn set_prob(logits: &[f32], set: &[u32]) -> f64 {
    let lp = log_softmax(logits);
    set.iter().map(|&t| math::exp(lp[t as usize])).sum()
}

fn set_logit_diff(logits: &[f32], greater: &[u32], less: &[u32]) -> f64 {
    let sum = |s: &[u32]| {
        s.iter()
            .map(|&t| f64::from(logits[t as usize]))
            .sum::<f64>()
    };
    sum(greater) - sum(less)
}

pub fn effect_answer_set(
    l: &RunLogits<'_>,
    greater: &[u32],
    less: &[u32],
    variant: AnswerSetVariant,
) -> Result<f64> {
    check_sets(greater, less)?;
    match variant {
        AnswerSetVariant::Prob => Ok(set_prob(l.patched, greater) - set_prob(l.corrupted, greater)),
        AnswerSetVariant::LogitDiff => normalize(
            set_logit_diff(l.patched, greater, less),
            set_logit_diff(l.corrupted, greater, less),
            set_logit_diff(l.clean, greater, less),
        ),
    }
}

/// Layers jointly restored for window `w` centred at `center`:
/// `[center - ⌊w/2⌋, center + ⌈w/2⌉)` clipped to the model depth.
pub fn window_range(center: usize, window: usize, n_layers: usize) -> Range<usize> {
    let lo = center.saturating_sub(window / 2);
    let hi = (center + window.div_ceil(2)).min(n_layers);
    lo..hi.max(lo)
}

/// What a sweep row patched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchTarget {
    pub layer: usize,
    /// Attention head, or `None` for an MLP layer.
    pub head: Option<usize>,
    /// Single patched position, or `None` for the sweep's default positions.
    pub position: Option<usize>,
    /// Number of MLP layers restored jointly (1 for heads).
    pub window: usize,
}

impl PatchTarget {
    pub const fn head(layer: usize, head: usize) -> Self {
        Self {
            layer,
            head: Some(head),
            position: None,
            window: 1,
        }
    }

    pub const fn head_at(layer: usize, head: usize, position: usize) -> Self {
        Self {
            layer,
            head: Some(head),
            position: Some(position),
            window: 1,
        }
    }

    pub const fn mlp(layer: usize, window: usize) -> Self {
        Self {
            layer,
            head: None,
            position: None,
            window,
        }
    }

    pub const fn mlp_at(layer: usize, position: usize, window: usize) -> Self {
        Self {
            layer,
            head: None,
            position: Some(position),
            window,
        }
    }

    /// `"L.H"` for heads, `"mlpL"` for MLP layers.
    pub fn unit_label(&self) -> String {
        match self.head {
            Some(h) => format!("{}.{}", self.layer, h),
            None => format!("mlp{}", self.layer),
        }
    }
}

impl fmt::Display for PatchTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.unit_label())?;
        if let Some(p) = self.position {
            write!(f, "@{p}")?;
        }
        if self.window != 1 {
            write!(f, "/w{}", self.window)?;
        }
        Ok(())
    }
}

impl FromStr for PatchTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad patch target {s:?}"));
        let (rest, window) = match s.split_once("/w") {
            Some((r, w)) => (r, w.parse().map_err(|_| bad())?),
            None => (s, 1),
        };
        let (unit, position) = match rest.split_once('@') {
            Some((u, p)) => (u, Some(p.parse().map_err(|_| bad())?)),
            None => (rest, None),
        };
        let (layer, head) = if let Some(l) = unit.strip_prefix("mlp") {
            (l.parse().map_err(|_| bad())?, None)
        } else {
            let (l, h) = unit.split_once('.').ok_or_else(bad)?;
            (
                l.parse().map_err(|_| bad())?,
                Some(h.parse().map_err(|_| bad())?),
            )
        };
        Ok(Self {
            layer,
            head,
            position,
            window,
        })
    }
}

/// Mean effect per (target, metric), averaged over prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectMatrix {
    pub targets: Vec<PatchTarget>,
    pub metrics: Vec<MetricKind>,
    /// `effects[target][metric]`; NaN when every prompt was excluded.
    pub effects: Vec<Vec<f64>>,
    pub n_prompts: usize,
    /// Excluded (target, prompt) evaluations per metric.
    pub excluded: Vec<usize>,
}

impl EffectMatrix {
    pub fn metric_index(&self, metric: MetricKind) -> Result<usize> {
        self.metrics
            .iter()
            .position(|&m| m == metric)
            .ok_or_else(|| Error::Config(format!("metric {metric} not in effect matrix")))
    }

    pub fn column(&self, metric: MetricKind) -> Result<Vec<f64>> {
        let j = self.metric_index(metric)?;
        Ok(self.effects.iter().map(|row| row[j]).collect())
    }

    pub fn get(&self, target: &PatchTarget, metric: MetricKind) -> Result<f64> {
        let j = self.metric_index(metric)?;
        let i = self
            .targets
            .iter()
            .position(|t| t == target)
            .ok_or_else(|| Error::Config(format!("target {target} not in effect matrix")))?;
        Ok(self.effects[i][j])
    }

    /// Mean and population SD of a metric column over finite entries.
    pub fn stats(&self, metric: MetricKind) -> Result<(f64, f64)> {
        Ok(mean_sd(&self.column(metric)?))
    }

    pub fn is_finite(&self) -> bool {
        self.effects.iter().flatten().all(|v| v.is_finite())
    }
}

/// Mean and population SD of the finite values (NaN, NaN when none).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, math::sqrt(var))
}

/// Running sums behind an [`EffectMatrix`].
#[derive(Debug, Clone)]
pub struct EffectAccumulator {
    targets: Vec<PatchTarget>,
    metrics: Vec<MetricKind>,
    sums: Vec<Vec<f64>>,
    counts: Vec<Vec<usize>>,
    attempts: Vec<usize>,
    prompts: usize,
}

impl EffectAccumulator {
    pub fn new(targets: Vec<PatchTarget>, metrics: Vec<MetricKind>) -> Self {
        let (t, m) = (targets.len(), metrics.len());
        Self {
            targets,
            metrics,
            sums: vec![vec![0.0; m]; t],
            counts: vec![vec![0; m]; t],
            attempts: vec![0; m],
            prompts: 0,
        }
    }

    pub fn targets(&self) -> &[PatchTarget] {
        &self.targets
    }

    pub fn metrics(&self) -> &[MetricKind] {
        &self.metrics
    }

    /// Records one prompt's result for target `t`, metric index `m`. Errors
    /// mark the evaluation as excluded.
    pub fn record(&mut self, t: usize, m: usize, value: Result<f64>) {
        self.attempts[m] += 1;
        if let Ok(v) = value {
            if v.is_finite() {
                self.sums[t][m] += v;
                self.counts[t][m] += 1;
            }
        }
    }

    pub fn add_prompts(&mut self, n: usize) {
        self.prompts += n;
    }

    pub fn finish(self) -> EffectMatrix {
        let effects = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
                    .collect()
            })
            .collect();
        let excluded = (0..self.metrics.len())
            .map(|m| self.attempts[m] - self.counts.iter().map(|c| c[m]).sum::<usize>())
            .collect();
        EffectMatrix {
            targets: self.targets,
            metrics: self.metrics,
            effects,
            n_prompts: self.prompts,
            excluded,
        }
    }
}

/// Sums single-layer MLP effects over each window: row `ℓ` of the result is
/// `Σ_{k ∈ window_range(ℓ)} single[k]`. Rows are matched by (layer, position).
pub fn sum_windows(single: &EffectMatrix, window: usize, n_layers: usize) -> Result<EffectMatrix> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let mut targets = Vec::with_capacity(single.targets.len());
    let mut effects = Vec::with_capacity(single.targets.len());
    for t in &single.targets {
        if t.head.is_some() || t.window != 1 {
            return Err(Error::Config(format!("{t} is not a single-layer MLP row")));
        }
        let mut acc = vec![0.0; single.metrics.len()];
        for k in window_range(t.layer, window, n_layers) {
            let i = single
                .targets
                .iter()
                .position(|u| u.layer == k && u.position == t.position && u.head.is_none())
                .ok_or_else(|| Error::Config(format!("single-layer row for layer {k} missing")))?;
            for (a, v) in acc.iter_mut().zip(&single.effects[i]) {
                *a += v;
            }
        }
        targets.push(PatchTarget { window, ..*t });
        effects.push(acc);
    }
    Ok(EffectMatrix {
        targets,
        metrics: single.metrics.clone(),
        effects,
        n_prompts: single.n_prompts,
        excluded: single.excluded.clone(),
    })
}

/// Targets more than two SDs above or below the sweep mean.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    pub metric: MetricKind,
    pub mean: f64,
    pub sd: f64,
    pub positive: Vec<PatchTarget>,
    pub negative: Vec<PatchTarget>,
}

impl Detection {
    pub fn positive_labels(&self) -> Vec<String> {
        self.positive.iter().map(|t| format!("{t}")).collect()
    }

    pub fn negative_labels(&self) -> Vec<String> {
        self.negative.iter().map(|t| format!("{t}")).collect()
    }

    pub fn all(&self) -> impl Iterator<Item = &PatchTarget> {
        self.positive.iter().chain(&self.negative)
    }
}

/// Detection threshold in SDs.
pub const DETECTION_SDS: f64 = 2.0;

/// Applies the 2-SD rule to one metric column. A vanishing SD detects nothing.
pub fn detect(matrix: &EffectMatrix, metric: MetricKind) -> Result<Detection> {
    let column = matrix.column(metric)?;
    if column.len() < 2 {
        return Err(Error::Config("detection needs at least two targets".into()));
    }
    let (mean, sd) = mean_sd(&column);
    let mut out = Detection {
        metric,
        mean,
        sd,
        positive: Vec::new(),
        negative: Vec::new(),
    };
    let scale = column
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if !sd.is_finite() || sd <= 1e-12 * scale || sd == 0.0 {
        return Ok(out);
    }
    for (t, &v) in matrix.targets.iter().zip(&column) {
        if !v.is_finite() {
            continue;
        }
        if v > mean + DETECTION_SDS * sd {
            out.positive.push(*t);
        } else if v < mean - DETECTION_SDS * sd {
            out.negative.push(*t);
        }
    }
    Ok(out)
}
