// SPDX-License-Identifier: MIT OR Apache-2.0

//! Clean / corrupted / patched runs.
//!
//! The clean run records every site a [`PatchTemplate`] names. The corrupted
//! run sees the corrupted input unmodified. The patched run sees the same
//! corrupted input with the template's sites overwritten from the clean cache.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::corruption::{Answer, PromptPair};
use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::model::{
    ForwardItem, ForwardOptions, ForwardRecord, HookKind, HookPoint, HookSite, LogitRows, Model,
    Positions,
};
use crate::tokenizer::TokenRange;

/// Activations recorded by one forward pass, keyed by hook point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationCache {
    seq_len: usize,
    entries: BTreeMap<HookPoint, Matrix>,
}

impl ActivationCache {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            entries: BTreeMap::new(),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, point: &HookPoint) -> Option<&Matrix> {
        self.entries.get(point)
    }

    pub fn require(&self, point: &HookPoint) -> Result<&Matrix> {
        self.entries.get(point).ok_or(Error::CacheMiss(*point))
    }

    pub fn contains(&self, point: &HookPoint) -> bool {
        self.entries.contains_key(point)
    }

    pub fn points(&self) -> impl Iterator<Item = &HookPoint> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HookPoint, &Matrix)> {
        self.entries.iter()
    }

    pub(crate) fn insert(&mut self, point: HookPoint, value: Matrix) {
        self.entries.insert(point, value);
    }
}

/// Validated list of sites to restore, independent of any particular cache.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatchTemplate {
    sites: Vec<HookSite>,
}

impl PatchTemplate {
    /// Rejects templates naming the same hook point twice.
    pub fn new(sites: Vec<HookSite>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for site in &sites {
            if !seen.insert(site.point) {
                return Err(Error::Patch(format!("{} listed twice", site.point)));
            }
        }
        Ok(Self { sites })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Combines two templates, taking the union of positions at shared points.
    pub fn merged(&self, other: &PatchTemplate) -> PatchTemplate {
        let mut by_point: BTreeMap<HookPoint, Positions> = BTreeMap::new();
        for site in self.sites.iter().chain(&other.sites) {
            by_point
                .entry(site.point)
                .and_modify(|p| *p = p.union(&site.positions))
                .or_insert_with(|| site.positions.clone());
        }
        PatchTemplate {
            sites: by_point
                .into_iter()
                .map(|(point, positions)| HookSite { point, positions })
                .collect(),
        }
    }

    pub fn sites(&self) -> &[HookSite] {
        &self.sites
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = HookPoint> + '_ {
        self.sites.iter().map(|s| s.point)
    }

    /// Earliest block whose computation a patch can change. Everything before
    /// it is identical to the corrupted run.
    pub fn first_layer(&self) -> Option<usize> {
        self.sites
            .iter()
            .map(|s| {
                if s.point.kind == HookKind::EmbedOut {
                    0
                } else {
                    s.point.layer
                }
            })
            .min()
    }

    /// Attaches a source cache; every site must be present in it.
    pub fn bind<'a>(&'a self, source: &'a ActivationCache) -> Result<PatchSpec<'a>> {
        for site in &self.sites {
            source.require(&site.point)?;
        }
        Ok(PatchSpec {
            sites: &self.sites,
            source,
        })
    }
}

/// Sites plus the cache their values come from.
#[derive(Debug, Clone, Copy)]
pub struct PatchSpec<'a> {
    sites: &'a [HookSite],
    source: &'a ActivationCache,
}

impl<'a> PatchSpec<'a> {
    pub fn sites(&self) -> &'a [HookSite] {
        self.sites
    }

    pub fn source(&self) -> &'a ActivationCache {
        self.source
    }

    pub(crate) fn lookup(&self, point: &HookPoint) -> Option<(&'a HookSite, &'a Matrix)> {
        let site = self.sites.iter().find(|s| s.point == *point)?;
        Some((site, self.source.get(point)?))
    }
}

/// The three runs of one prompt pair.
#[derive(Debug, Clone)]
pub struct RunTriple {
    pub clean: ForwardRecord,
    pub corrupted: ForwardRecord,
    pub patched: ForwardRecord,
    pub answer: Answer,
}

impl RunTriple {
    pub fn logits(&self) -> crate::metrics::RunLogits<'_> {
        crate::metrics::RunLogits {
            clean: self.clean.final_logits(),
            corrupted: self.corrupted.final_logits(),
            patched: self.patched.final_logits(),
        }
    }
}

/// Runs clean, corrupted and patched passes for one pair.
///
/// `capture_extra` is recorded on all three runs.
pub fn run_triple(
    model: &Model,
    pair: &PromptPair,
    template: &PatchTemplate,
    capture_extra: &BTreeSet<HookPoint>,
) -> Result<RunTriple> {
    pair.validate()?;
    let mut clean_capture = capture_extra.clone();
    clean_capture.extend(template.points());
    let clean_opts = ForwardOptions {
        capture: clean_capture,
        ..Default::default()
    };
    let clean = model.forward(
        crate::model::ModelInput::Tokens(&pair.clean.ids),
        &clean_opts,
        None,
    )?;
    let extra = ForwardOptions {
        capture: capture_extra.clone(),
        ..Default::default()
    };
    let corrupted = model.forward(pair.corrupt.input(), &extra, None)?;
    let spec = template.bind(&clean.cache).map_err(|e| match e {
        Error::CacheMiss(p) => Error::Patch(format!("clean cache lacks {p}")),
        other => other,
    })?;
    let patched = model.forward(pair.corrupt.input(), &extra, Some(&spec))?;
    Ok(RunTriple {
        clean,
        corrupted,
        patched,
        answer: pair.answer.clone(),
    })
}

/// Clean and corrupted records for a batch of pairs.
#[derive(Debug, Clone)]
pub struct Baselines {
    pub clean: Vec<ForwardRecord>,
    pub corrupted: Vec<ForwardRecord>,
}

/// Clean runs capturing `clean_capture`; corrupted runs capturing every
/// `resid_post` so patched runs can resume mid-network.
pub fn baseline_runs(
    model: &Model,
    pairs: &[&PromptPair],
    clean_capture: &BTreeSet<HookPoint>,
) -> Result<Baselines> {
    for pair in pairs {
        pair.validate()?;
    }
    let clean_items: Vec<ForwardItem<'_>> = pairs
        .iter()
        .map(|p| ForwardItem::new(crate::model::ModelInput::Tokens(&p.clean.ids)))
        .collect();
    let opts = ForwardOptions {
        capture: clean_capture.clone(),
        logits: LogitRows::Last,
        start_layer: 0,
    };
    let clean = model.forward_batch(&clean_items, &opts)?;
    let corrupt_items: Vec<ForwardItem<'_>> = pairs
        .iter()
        .map(|p| ForwardItem::new(p.corrupt.input()))
        .collect();
    let resume_points = (0..model.config().n_layers).map(HookPoint::resid_post);
    let opts = ForwardOptions {
        capture: resume_points.collect(),
        logits: LogitRows::Last,
        start_layer: 0,
    };
    let corrupted = model.forward_batch(&corrupt_items, &opts)?;
    Ok(Baselines { clean, corrupted })
}

/// Patched runs of a batch for one template, resumed from the corrupted
/// caches at the template's first layer. Returns final-position logits.
pub fn patched_runs(
    model: &Model,
    pairs: &[&PromptPair],
    baselines: &Baselines,
    template: &PatchTemplate,
) -> Result<Vec<ForwardRecord>> {
    let templates: Vec<&PatchTemplate> = pairs.iter().map(|_| template).collect();
    patched_runs_each(model, pairs, baselines, &templates)
}

/// Like [`patched_runs`] with one template per pair, for sweeps whose patched
/// positions depend on the prompt. The batch resumes at the earliest layer
/// any template touches.
pub fn patched_runs_each(
    model: &Model,
    pairs: &[&PromptPair],
    baselines: &Baselines,
    templates: &[&PatchTemplate],
) -> Result<Vec<ForwardRecord>> {
    if templates.len() != pairs.len()
        || baselines.clean.len() != pairs.len()
        || baselines.corrupted.len() != pairs.len()
    {
        return Err(Error::Patch(format!(
            "{} pairs, {} templates, {} baselines",
            pairs.len(),
            templates.len(),
            baselines.clean.len()
        )));
    }
    let n_layers = model.config().n_layers;
    let start = templates
        .iter()
        .filter_map(|t| t.first_layer())
        .min()
        .unwrap_or(n_layers);
    let specs: Vec<PatchSpec<'_>> = templates
        .iter()
        .zip(&baselines.clean)
        .map(|(t, rec)| t.bind(&rec.cache))
        .collect::<Result<_>>()?;
    let items: Vec<ForwardItem<'_>> = pairs
        .iter()
        .zip(&specs)
        .zip(&baselines.corrupted)
        .map(|((p, spec), corrupted)| {
            let item = ForwardItem::new(p.corrupt.input()).with_patch(spec);
            if start > 0 {
                item.resuming(&corrupted.cache)
            } else {
                item
            }
        })
        .collect();
    let opts = ForwardOptions {
        capture: BTreeSet::new(),
        logits: LogitRows::Last,
        start_layer: start,
    };
    model.forward_batch(&items, &opts)
}

pub fn attention_to_span(
    record: &ForwardRecord,
    layer: usize,
    head: usize,
    from: usize,
    to: TokenRange,
) -> Result<f64> {
    let pattern = record.attn_pattern(layer, head)?;
    if from >= pattern.rows() || to.end > pattern.cols() {
        return Err(Error::Span(format!(
            "attention query {from} or span {}..{} outside {} positions",
            to.start,
            to.end,
            pattern.rows()
        )));
    }
    Ok(to
        .positions()
        .map(|c| f64::from(pattern.get(from, c)))
        .sum())
}

/// Template restoring the value vectors of the listed heads at all positions.
pub fn value_patch_spec(heads: &[(usize, usize)]) -> Result<PatchTemplate> {
    PatchTemplate::new(
        heads
            .iter()
            .map(|&(layer, head)| HookSite::all(HookPoint::attn_value(layer, head)))
            .collect(),
    )
}

/// Template restoring `z` of the listed heads at the given positions.
pub fn head_patch_spec(heads: &[(usize, usize)], positions: Positions) -> Result<PatchTemplate> {
    PatchTemplate::new(
        heads
            .iter()
            .map(|&(layer, head)| HookSite {
                point: HookPoint::head_out(layer, head),
                positions: positions.clone(),
            })
            .collect(),
    )
}
