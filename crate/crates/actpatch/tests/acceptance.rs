// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one line per criterion.
//!
//! Criteria 2 to 7 need GPT-2 small: point `ACTPATCH_GPT2_DIR` at a directory
//! holding `config.json` and `model.safetensors` (Hugging Face layout).
//! Criterion 9 uses `ACTPATCH_ATTN_ONLY_DIR` when set, with the checkpoint's
//! own `vocab.json` and `merges.txt`. Without them those criteria report
//! BLOCKED. Blocked criteria fail the process only when
//! `ACTPATCH_ACCEPTANCE_STRICT=1`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use actpatch::config::SweepKind;
use actpatch::{io, runner};
use actpatch_core::corruption::{
    corrupt_gn, name_tokens, Answer, Corrupted, CorruptionMethod, CorruptionSpec, PromptPair,
};
use actpatch_core::intervention::{
    attention_to_span, baseline_runs, patched_runs, run_triple, value_patch_spec,
};
use actpatch_core::metrics::{
    detect, prob, sum_windows, Detection, EffectMatrix, MetricKind, RunLogits,
};
use actpatch_core::model::{ForwardItem, ForwardOptions, LogitRows, ModelInput};
use actpatch_core::tasks::{
    build_pairs, fact_prompts, gen_docstring, gen_greater_than, gen_ioi, DocstringSpec,
    GreaterThanSpec, IoiSpec, TaskPrompt, IOI_NAMES,
};
use actpatch_core::{
    HookPoint, HookSite, Matrix, Model, ModelConfig, PatchTemplate, SpanLabel, TokenRange,
    TokenSequence, Vocab, Weights,
};

const ASSETS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets");
const BATCH: usize = 16;

type Check = Result<(bool, String), String>;
type GptCheck = fn(&Loaded) -> Check;

enum Status {
    Pass,
    Fail,
    Blocked,
}

struct Line {
    id: u8,
    status: Status,
    detail: String,
}

fn line(id: u8, check: impl FnOnce() -> Check) -> Line {
    let started = Instant::now();
    let check = check();
    let secs = started.elapsed().as_secs_f64();
    let check = check.map(|(ok, d)| (ok, format!("{d} [{secs:.1}s]")));
    match check {
        Ok((true, detail)) => Line {
            id,
            status: Status::Pass,
            detail,
        },
        Ok((false, detail)) => Line {
            id,
            status: Status::Fail,
            detail,
        },
        Err(e) => Line {
            id,
            status: Status::Fail,
            detail: format!("error: {e}"),
        },
    }
}

fn blocked(id: u8, why: &str) -> Line {
    Line {
        id,
        status: Status::Blocked,
        detail: why.to_string(),
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ------------------------------------------------------------------ models

struct Loaded {
    model: Model,
    vocab: Vocab,
}

fn bundled_vocab() -> Result<Vocab, String> {
    io::load_vocab(
        &Path::new(ASSETS).join("gpt2/vocab.json"),
        &Path::new(ASSETS).join("gpt2/merges.txt"),
    )
    .map_err(err)
}

fn load_dir(dir: &Path, default_vocab: bool) -> Result<Loaded, String> {
    let model =
        io::load_model(&dir.join("config.json"), &dir.join("model.safetensors")).map_err(err)?;
    let (v, m) = (dir.join("vocab.json"), dir.join("merges.txt"));
    let vocab = if v.is_file() && m.is_file() {
        io::load_vocab(&v, &m).map_err(err)?
    } else if default_vocab {
        bundled_vocab()?
    } else {
        return Err(format!("{} has no vocab.json/merges.txt", dir.display()));
    };
    Ok(Loaded { model, vocab })
}

fn env_dir(var: &str) -> Option<PathBuf> {
    std::env::var_os(var)
        .map(PathBuf::from)
        .filter(|p| !p.as_os_str().is_empty())
}

fn toy(n_layers: usize, n_heads: usize, d: usize, vocab: usize, seed: u64) -> Model {
    let cfg = ModelConfig::toy(n_layers, n_heads, d, vocab);
    Model::new(cfg.clone(), Weights::random(&cfg, seed)).expect("toy model")
}

// ------------------------------------------------------------------ helpers

fn pairs_for(
    g: &Loaded,
    prompts: &[TaskPrompt],
    method: CorruptionMethod,
    targets: &[SpanLabel],
    seed: u64,
) -> Result<Vec<PromptPair>, String> {
    let pool = name_tokens(
        &g.vocab,
        &IOI_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
    );
    let spec = CorruptionSpec::new(method, targets.to_vec(), seed);
    Ok(build_pairs(&g.model, &g.vocab, prompts, &spec, &pool)
        .map_err(err)?
        .pairs)
}

fn ioi(
    g: &Loaded,
    n: usize,
    method: CorruptionMethod,
    targets: &[SpanLabel],
) -> Result<Vec<PromptPair>, String> {
    let str_targets: &[SpanLabel] = if method == CorruptionMethod::Str {
        targets
    } else {
        &[SpanLabel::S2]
    };
    let prompts = gen_ioi(&IoiSpec::with_defaults(n, 0), &g.vocab, str_targets).map_err(err)?;
    pairs_for(g, &prompts, method, targets, 0)
}

fn correct(a: &Answer) -> u32 {
    match a {
        Answer::Pair { correct, .. } => *correct,
        Answer::Sets { .. } => unreachable!("pair answers only"),
    }
}

/// Mean clean and corrupted probability of the correct answer.
fn mean_probs(model: &Model, pairs: &[PromptPair]) -> Result<(f64, f64), String> {
    let (mut clean, mut corrupt) = (0.0, 0.0);
    for chunk in pairs.chunks(BATCH) {
        let refs: Vec<&PromptPair> = chunk.iter().collect();
        let b = baseline_runs(model, &refs, &BTreeSet::new()).map_err(err)?;
        for (i, p) in chunk.iter().enumerate() {
            clean += prob(b.clean[i].final_logits(), correct(&p.answer));
            corrupt += prob(b.corrupted[i].final_logits(), correct(&p.answer));
        }
    }
    let n = pairs.len() as f64;
    Ok((clean / n, corrupt / n))
}

/// Mean metric over prompts for one fixed template; failed prompts are skipped.
fn template_effect(
    model: &Model,
    pairs: &[PromptPair],
    t: &PatchTemplate,
    metric: MetricKind,
) -> Result<f64, String> {
    let (mut sum, mut n) = (0.0, 0usize);
    let capture: BTreeSet<HookPoint> = t.points().collect();
    for chunk in pairs.chunks(BATCH) {
        let refs: Vec<&PromptPair> = chunk.iter().collect();
        let b = baseline_runs(model, &refs, &capture).map_err(err)?;
        let patched = patched_runs(model, &refs, &b, t).map_err(err)?;
        for (i, p) in chunk.iter().enumerate() {
            let l = RunLogits {
                clean: b.clean[i].final_logits(),
                corrupted: b.corrupted[i].final_logits(),
                patched: patched[i].final_logits(),
            };
            if let Ok(v) = metric.evaluate(&l, &p.answer) {
                if v.is_finite() {
                    sum += v;
                    n += 1;
                }
            }
        }
    }
    Ok(sum / n as f64)
}

fn labels(d: &Detection) -> (BTreeSet<String>, BTreeSet<String>) {
    (
        d.positive_labels().into_iter().collect(),
        d.negative_labels().into_iter().collect(),
    )
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn fmt_set(s: &BTreeSet<String>) -> String {
    let key = |l: &String| -> Vec<usize> {
        l.split('.')
            .map(|p| p.parse().unwrap_or(usize::MAX))
            .collect()
    };
    let mut v: Vec<&String> = s.iter().collect();
    v.sort_by_key(|l| key(l));
    format!(
        "{{{}}}",
        v.into_iter().cloned().collect::<Vec<_>>().join(", ")
    )
}

fn detect_m(m: &EffectMatrix, metric: MetricKind) -> Result<Detection, String> {
    detect(m, metric).map_err(err)
}

// ------------------------------------------------------------------ 1

fn tok_seq(ids: &[u32], span: usize) -> TokenSequence {
    let mut s = TokenSequence {
        ids: ids.to_vec(),
        text: String::new(),
        spans: Default::default(),
    };
    s.set_span(SpanLabel::S2, TokenRange::single(span)).unwrap();
    s.set_span(SpanLabel::Subject, TokenRange::new(0, span + 1))
        .unwrap();
    s
}

fn toy_pair(clean: &[u32], corrupt: &[u32]) -> PromptPair {
    PromptPair {
        clean: tok_seq(clean, 1),
        corrupt: Corrupted::Tokens(tok_seq(corrupt, 1)),
        answer: Answer::Pair {
            correct: 3,
            incorrect: 4,
        },
    }
}

fn every_point(cfg: &ModelConfig) -> Vec<HookPoint> {
    let mut v = vec![HookPoint::embed_out()];
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            v.extend([
                HookPoint::attn_pattern(l, h),
                HookPoint::attn_value(l, h),
                HookPoint::head_out(l, h),
            ]);
        }
        v.extend([HookPoint::attn_sublayer_out(l)]);
        if !cfg.attn_only {
            v.push(HookPoint::mlp_out(l));
        }
        v.push(HookPoint::resid_post(l));
    }
    v
}

/// Self-patch, full-patch, w=1 window identity, ν=0 noise, causal
/// invariance and the per-head decomposition on `model`.
fn identities(
    model: &Model,
    pairs: &[PromptPair],
    noise_span: SpanLabel,
) -> Result<Vec<String>, String> {
    let cfg = model.config().clone();
    let mut failures = Vec::new();
    let patchable: Vec<HookSite> = every_point(&cfg)
        .into_iter()
        .filter(|p| p.kind != actpatch_core::HookKind::AttnPattern)
        .map(HookSite::all)
        .collect();
    let everything = PatchTemplate::new(patchable).map_err(err)?;
    let resid = PatchTemplate::new(vec![HookSite::all(HookPoint::resid_post(cfg.n_layers - 1))])
        .map_err(err)?;
    let nothing = BTreeSet::new();
    let (mut self_dev, mut full_dev, mut decomp, mut causal) = (0f32, 0f32, 0f32, 0f32);
    let mut noise_exact = true;
    for p in pairs {
        let same = PromptPair {
            clean: p.clean.clone(),
            corrupt: Corrupted::Tokens(p.clean.clone()),
            answer: p.answer.clone(),
        };
        let r = run_triple(model, &same, &everything, &nothing).map_err(err)?;
        self_dev = self_dev.max(r.patched.logits.max_abs_diff(&r.clean.logits));
        let r = run_triple(model, p, &resid, &nothing).map_err(err)?;
        full_dev = full_dev.max(r.patched.logits.max_abs_diff(&r.clean.logits));

        let noised = corrupt_gn(model, &p.clean, &[noise_span], 0.0, 5, 0).map_err(err)?;
        let opts = ForwardOptions {
            logits: LogitRows::All,
            ..Default::default()
        };
        let a = model
            .forward(ModelInput::Tokens(&p.clean.ids), &opts, None)
            .map_err(err)?;
        let b = model
            .forward(ModelInput::Embedded(&noised), &opts, None)
            .map_err(err)?;
        noise_exact &= a.logits == b.logits;

        let capture = ForwardOptions::capturing(every_point(&cfg));
        let full = model
            .forward(ModelInput::Tokens(&p.clean.ids), &capture, None)
            .map_err(err)?;
        let k = p.clean.len() - 1;
        let mut changed = p.clean.ids.clone();
        changed[k] = (changed[k] + 1) % cfg.vocab_size as u32;
        let other = model
            .forward(ModelInput::Tokens(&changed), &capture, None)
            .map_err(err)?;
        causal = causal.max(
            full.logits
                .slice_rows(0, k)
                .max_abs_diff(&other.logits.slice_rows(0, k)),
        );
        for l in 0..cfg.n_layers {
            let pre = if l == 0 {
                HookPoint::embed_out()
            } else {
                HookPoint::resid_post(l - 1)
            };
            let mut sum = full.cache.require(&pre).map_err(err)?.clone();
            for h in 0..cfg.n_heads {
                let z = full.head_contribution(l, h).map_err(err)?;
                sum.add_assign(&model.head_residual_contribution(l, h, z).map_err(err)?)
                    .map_err(err)?;
            }
            let bias = &model.weights().blocks[l].attn.out_bias;
            sum.add_assign(&Matrix::from_fn(p.clean.len(), cfg.d_model, |_, c| bias[c]))
                .map_err(err)?;
            let mid = full
                .cache
                .require(&HookPoint::attn_sublayer_out(l))
                .map_err(err)?;
            let scale = mid.as_slice().iter().fold(1e-6f32, |a, v| a.max(v.abs()));
            decomp = decomp.max(sum.max_abs_diff(mid) / scale);
        }
    }
    if self_dev != 0.0 {
        failures.push(format!("self-patch deviates by {self_dev:e}"));
    }
    if full_dev > 1e-5 {
        failures.push(format!("full patch deviates by {full_dev:e}"));
    }
    if !noise_exact {
        failures.push("ν=0 noise changed logits".into());
    }
    if causal != 0.0 {
        failures.push(format!("future token changed earlier logits by {causal:e}"));
    }
    if decomp > 1e-4 {
        failures.push(format!("head decomposition off by {decomp:e} (relative)"));
    }
    if !cfg.attn_only {
        let metrics = [MetricKind::Prob, MetricKind::LogitDiffNorm, MetricKind::Kl];
        let window =
            runner::sweep_mlp_window(model, pairs, SweepKind::MlpLastSubject, 1, &metrics, 4)
                .map_err(err)?;
        let summed =
            runner::aggregate_sum_single(model, pairs, SweepKind::MlpLastSubject, 1, &metrics, 4)
                .map_err(err)?;
        let mut single_exact = window.effects == summed.effects;
        for (t, row) in window.targets.iter().zip(&window.effects) {
            let mut acc = vec![(0.0, 0usize); metrics.len()];
            for p in pairs {
                let last = p.clean.span(SpanLabel::Subject).map_err(err)?.last();
                let tpl =
                    PatchTemplate::new(vec![HookSite::at(HookPoint::mlp_out(t.layer), [last])])
                        .map_err(err)?;
                let r = run_triple(model, p, &tpl, &nothing).map_err(err)?;
                for (m, a) in metrics.iter().zip(acc.iter_mut()) {
                    if let Ok(v) = m.evaluate(&r.logits(), &p.answer) {
                        a.0 += v;
                        a.1 += 1;
                    }
                }
            }
            for ((s, n), &w) in acc.iter().zip(row) {
                let direct = if *n == 0 { f64::NAN } else { s / *n as f64 };
                single_exact &= direct.to_bits() == w.to_bits()
                    || (direct - w).abs() <= 1e-12 * w.abs().max(1.0);
            }
        }
        if !single_exact {
            failures.push("w=1 window sweep differs from single-layer patching".into());
        }
    }
    Ok(failures)
}

fn criterion_1() -> Check {
    let started = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..3u64 {
        let m = toy(2, 2, 16, 40, seed);
        let pairs = vec![
            toy_pair(&[1, 2, 3, 4, 5], &[1, 7, 3, 4, 5]),
            toy_pair(&[9, 8, 7, 6], &[9, 10, 7, 6]),
            toy_pair(&[11, 12, 13, 14, 15, 16, 17], &[11, 19, 13, 14, 15, 16, 17]),
        ];
        failures.extend(
            identities(&m, &pairs, SpanLabel::S2)?
                .into_iter()
                .map(|f| format!("seed {seed}: {f}")),
        );
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 60.0 {
        failures.push(format!("took {secs:.1}s"));
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            "all six identities hold on 3 seeds".to_string()
        } else {
            failures.join("; ")
        },
    ))
}

// ------------------------------------------------------------------ 2-7

fn criterion_2(g: &Loaded) -> Check {
    let pairs = ioi(g, 300, CorruptionMethod::Gn, &[SpanLabel::S2])?;
    let (clean, corrupt) = mean_probs(&g.model, &pairs)?;
    let ok = (clean - 0.481).abs() <= 0.05 && (corrupt - 0.129).abs() <= 0.05;
    Ok((ok, format!("clean P(IO) = {clean:.3} (0.481 ± 0.05), GN P(IO) = {corrupt:.3} (0.129 ± 0.05), n = 300")))
}

fn head_sweep(
    g: &Loaded,
    pairs: &[PromptPair],
    metrics: &[MetricKind],
) -> Result<EffectMatrix, String> {
    runner::sweep_heads(&g.model, pairs, metrics, BATCH).map_err(err)
}

fn criterion_3(g: &Loaded) -> Check {
    let pairs = ioi(g, 300, CorruptionMethod::Str, &[SpanLabel::S2])?;
    let m = head_sweep(g, &pairs, &[MetricKind::LogitDiffNorm, MetricKind::Prob])?;
    let (pos, neg) = labels(&detect_m(&m, MetricKind::LogitDiffNorm)?);
    let (ppos, pneg) = labels(&detect_m(&m, MetricKind::Prob)?);
    let must = set(&["9.9", "8.6", "7.9"]);
    let allowed = set(&["5.5", "7.9", "8.6", "8.10", "9.9", "9.6", "10.0"]);
    let ok = neg == set(&["10.7", "11.10"])
        && must.is_subset(&pos)
        && pos.is_subset(&allowed)
        && !ppos.contains("11.10")
        && !pneg.contains("11.10");
    Ok((
        ok,
        format!(
            "LD positive {} negative {}; prob positive {} negative {}",
            fmt_set(&pos),
            fmt_set(&neg),
            fmt_set(&ppos),
            fmt_set(&pneg)
        ),
    ))
}

fn criterion_4(g: &Loaded) -> Check {
    let pairs = ioi(
        g,
        300,
        CorruptionMethod::Abc,
        &[SpanLabel::S1, SpanLabel::S2, SpanLabel::Io],
    )?;
    let (_, corrupt) = mean_probs(&g.model, &pairs)?;
    let m = head_sweep(g, &pairs, &[MetricKind::Prob, MetricKind::LogitDiffNorm])?;
    let (ppos, pneg) = labels(&detect_m(&m, MetricKind::Prob)?);
    let (lpos, lneg) = labels(&detect_m(&m, MetricKind::LogitDiffNorm)?);
    let prob_all: BTreeSet<String> = ppos.union(&pneg).cloned().collect();
    let ld_all: BTreeSet<String> = lpos.union(&lneg).cloned().collect();
    let nm = set(&["10.7", "11.10"]);
    let ok = corrupt <= 1e-3 && prob_all.is_disjoint(&nm) && nm.is_subset(&ld_all);
    Ok((
        ok,
        format!(
            "ABC P(IO) = {corrupt:.2e}; prob detects {}; LD detects {}",
            fmt_set(&prob_all),
            fmt_set(&ld_all)
        ),
    ))
}

fn criterion_5(g: &Loaded) -> Check {
    let targets = [SpanLabel::S1, SpanLabel::Io];
    let gn = ioi(g, 300, CorruptionMethod::Gn, &targets)?;
    let m = head_sweep(g, &gn, &[MetricKind::LogitDiffNorm])?;
    let (pos, neg) = labels(&detect_m(&m, MetricKind::LogitDiffNorm)?);
    let st = ioi(g, 300, CorruptionMethod::Str, &targets)?;
    let m = head_sweep(g, &st, &[MetricKind::Prob])?;
    let (ppos, pneg) = labels(&detect_m(&m, MetricKind::Prob)?);
    let watched = set(&["9.6", "9.9", "10.0", "10.7", "11.10"]);
    let prob_hits: BTreeSet<String> = ppos
        .union(&pneg)
        .filter(|l| watched.contains(*l))
        .cloned()
        .collect();
    let ok = pos == set(&["9.6", "9.9", "10.0"])
        && neg == set(&["10.7", "11.10"])
        && prob_hits == set(&["9.9"]);
    Ok((
        ok,
        format!(
            "GN+LD positive {} negative {}; STR+prob among watched {}",
            fmt_set(&pos),
            fmt_set(&neg),
            fmt_set(&prob_hits)
        ),
    ))
}

const NAME_MOVERS: [(usize, usize); 3] = [(9, 6), (9, 9), (10, 0)];
const S_INHIBITION: [(usize, usize); 4] = [(7, 3), (7, 9), (8, 6), (8, 10)];

/// Mean attention from the last token to IO and to S1 over the Name Movers,
/// on the clean and on the corrupted input.
fn name_mover_attention(g: &Loaded, pairs: &[PromptPair]) -> Result<[(f64, f64); 2], String> {
    let opts = ForwardOptions {
        capture: NAME_MOVERS
            .iter()
            .map(|&(l, h)| HookPoint::attn_pattern(l, h))
            .collect(),
        logits: LogitRows::Last,
        start_layer: 0,
    };
    let mut acc = [(0.0, 0.0); 2];
    for chunk in pairs.chunks(BATCH) {
        let clean: Vec<ForwardItem<'_>> = chunk
            .iter()
            .map(|p| ForwardItem::new(ModelInput::Tokens(&p.clean.ids)))
            .collect();
        let corrupt: Vec<ForwardItem<'_>> = chunk
            .iter()
            .map(|p| ForwardItem::new(p.corrupt.input()))
            .collect();
        for (slot, items) in [clean, corrupt].iter().enumerate() {
            let recs = g.model.forward_batch(items, &opts).map_err(err)?;
            for (p, r) in chunk.iter().zip(&recs) {
                let last = p.clean.len() - 1;
                let io = p.clean.span(SpanLabel::Io).map_err(err)?;
                let s1 = p.clean.span(SpanLabel::S1).map_err(err)?;
                for &(l, h) in &NAME_MOVERS {
                    acc[slot].0 += attention_to_span(r, l, h, last, io).map_err(err)?;
                    acc[slot].1 += attention_to_span(r, l, h, last, s1).map_err(err)?;
                }
            }
        }
    }
    let n = (pairs.len() * NAME_MOVERS.len()) as f64;
    Ok(acc.map(|(io, s1)| (io / n, s1 / n)))
}

fn criterion_6(g: &Loaded) -> Check {
    let gn = ioi(g, 500, CorruptionMethod::Gn, &[SpanLabel::S2])?;
    let [(clean_io, _), (gn_io, gn_s1)] = name_mover_attention(g, &gn)?;
    let st = ioi(g, 500, CorruptionMethod::Str, &[SpanLabel::S2])?;
    let values = value_patch_spec(&S_INHIBITION).map_err(err)?;
    let ld_str = template_effect(&g.model, &st, &values, MetricKind::LogitDiffNorm)?;
    let ld_gn = template_effect(&g.model, &gn, &values, MetricKind::LogitDiffNorm)?;
    let ok = (clean_io - 0.58).abs() <= 0.05
        && (gn_io - 0.26).abs() <= 0.05
        && (gn_s1 - 0.21).abs() <= 0.05
        && (ld_str - 1.04).abs() <= 0.15
        && (ld_gn - 0.49).abs() <= 0.15;
    Ok((
        ok,
        format!(
            "clean attn→IO {clean_io:.3} (0.58), GN attn→IO {gn_io:.3} (0.26) →S1 {gn_s1:.3} (0.21); \
             S-Inhibition value patch LD: STR {ld_str:.3} (1.04 ± 0.15), GN {ld_gn:.3} (0.49 ± 0.15)"
        ),
    ))
}

fn criterion_7(g: &Loaded) -> Check {
    let prompts =
        gen_greater_than(&GreaterThanSpec::with_defaults(300, 0), &g.vocab).map_err(err)?;
    let metric = [MetricKind::AnswerSetLogitDiff];
    let st = pairs_for(g, &prompts, CorruptionMethod::Str, &[SpanLabel::Yy], 0)?;
    let (pos, neg) = labels(&detect_m(&head_sweep(g, &st, &metric)?, metric[0])?);
    let str_all: BTreeSet<String> = pos.union(&neg).cloned().collect();
    let gn = pairs_for(g, &prompts, CorruptionMethod::Gn, &[SpanLabel::Yy], 0)?;
    let (gpos, gneg) = labels(&detect_m(&head_sweep(g, &gn, &metric)?, metric[0])?);
    let gn_all: BTreeSet<String> = gpos.union(&gneg).cloned().collect();
    let expected = set(&["6.9", "7.10", "8.11", "9.1", "10.4"]);
    let sym = str_all.symmetric_difference(&expected).count();
    let shared = gn_all.intersection(&str_all).count();
    Ok((
        sym <= 1 && shared <= 3,
        format!(
            "STR detects {} (symmetric difference {sym}); GN detects {} (shares {shared})",
            fmt_set(&str_all),
            fmt_set(&gn_all)
        ),
    ))
}

// ------------------------------------------------------------------ 8

fn criterion_8(gpt2: Option<&Loaded>) -> Check {
    let owned;
    let (g, which) = match gpt2 {
        Some(g) => (g, "GPT-2 small"),
        None => {
            owned = Loaded {
                model: toy(6, 2, 16, 50257, 11),
                vocab: bundled_vocab()?,
            };
            (&owned, "toy 6-layer model with the GPT-2 tokenizer")
        }
    };
    let records =
        io::load_fact_records(&Path::new(ASSETS).join("paired_facts.json")).map_err(err)?;
    let (prompts, rejected) = fact_prompts(&records, &g.vocab);
    let accepted = records.len()
        - rejected
            .iter()
            .map(|r| r.index)
            .collect::<BTreeSet<_>>()
            .len();
    if accepted < 50 {
        return Ok((false, format!("only {accepted} usable pairs")));
    }
    let metrics = [MetricKind::Prob, MetricKind::LogitDiffNorm, MetricKind::Kl];
    let n_layers = g.model.config().n_layers;
    let mut failures = Vec::new();
    let mut rows = 0;
    for method in [CorruptionMethod::Gn, CorruptionMethod::Str] {
        let pairs = pairs_for(g, &prompts, method, &[SpanLabel::Subject], 0)?;
        for kind in [
            SweepKind::MlpLastSubject,
            SweepKind::MlpAllPos,
            SweepKind::MlpLastToken,
        ] {
            let single = runner::sweep_mlp_window(&g.model, &pairs, kind, 1, &metrics, BATCH)
                .map_err(err)?;
            for w in [1usize, 3, 5, 10] {
                let w = w.min(n_layers);
                let joint = if w == 1 {
                    single.clone()
                } else {
                    runner::sweep_mlp_window(&g.model, &pairs, kind, w, &metrics, BATCH)
                        .map_err(err)?
                };
                let summed = sum_windows(&single, w, n_layers).map_err(err)?;
                rows += joint.targets.len() + summed.targets.len();
                if !joint.is_finite() || !summed.is_finite() {
                    failures.push(format!(
                        "{} {kind:?} w={w}: non-finite effects",
                        method.as_str()
                    ));
                }
                if w == 1 && joint.effects != summed.effects {
                    failures.push(format!(
                        "{} {kind:?}: w=1 joint differs from summed",
                        method.as_str()
                    ));
                }
            }
        }
        // Per-position sweep over the largest equal-length group.
        let mut by_len: BTreeMap<usize, Vec<PromptPair>> = BTreeMap::new();
        for p in &pairs {
            by_len.entry(p.clean.len()).or_default().push(p.clone());
        }
        let group = by_len
            .into_values()
            .max_by_key(Vec::len)
            .unwrap_or_default();
        let by_pos =
            runner::sweep_mlp_window(&g.model, &group, SweepKind::MlpByPos, 1, &metrics, BATCH)
                .map_err(err)?;
        rows += by_pos.targets.len();
        if !by_pos.is_finite() || by_pos.targets.len() != n_layers * group[0].clean.len() {
            failures.push(format!("{} per-position sweep malformed", method.as_str()));
        }
    }
    let toy_pairs: Vec<PromptPair> = pairs_for(
        g,
        &prompts[..6],
        CorruptionMethod::Str,
        &[SpanLabel::Subject],
        0,
    )?;
    failures.extend(identities(&g.model, &toy_pairs, SpanLabel::Subject)?);
    let detail = format!(
        "{which}: {accepted} pairs ({} prompts), GN and STR, windows 1/3/5/10 joint and summed, \
         last-subject/all/last-token/per-position, {rows} finite rows",
        prompts.len()
    );
    if failures.is_empty() {
        Ok((true, detail))
    } else {
        Ok((false, format!("{detail}; {}", failures.join("; "))))
    }
}

// ------------------------------------------------------------------ 9

fn criterion_9(dir: Option<&Path>) -> Check {
    let metrics = [MetricKind::Prob];
    match dir {
        Some(dir) => {
            let g = load_dir(dir, false)?;
            let prompts =
                gen_docstring(&DocstringSpec::with_defaults(200, 0), &g.vocab).map_err(err)?;
            let pairs = pairs_for(&g, &prompts, CorruptionMethod::Str, &[SpanLabel::CDef], 0)?;
            let m =
                runner::sweep_heads_by_position(&g.model, &pairs, &metrics, BATCH).map_err(err)?;
            let last = pairs[0].clean.len() - 1;
            let d = detect_m(&m, MetricKind::Prob)?;
            let at_last: BTreeSet<String> = d
                .all()
                .filter(|t| t.position == Some(last))
                .map(|t| t.unit_label())
                .collect();
            Ok((
                at_last == set(&["3.0", "3.6"]),
                format!("detected at last position {}", fmt_set(&at_last)),
            ))
        }
        None => {
            let g = Loaded {
                model: toy_attn_only(),
                vocab: bundled_vocab()?,
            };
            let prompts =
                gen_docstring(&DocstringSpec::with_defaults(8, 0), &g.vocab).map_err(err)?;
            let pairs = pairs_for(&g, &prompts, CorruptionMethod::Str, &[SpanLabel::CDef], 0)?;
            let m =
                runner::sweep_heads_by_position(&g.model, &pairs, &metrics, BATCH).map_err(err)?;
            let n = pairs[0].clean.len();
            let ok = m.targets.len() == 4 * 4 * n
                && m.is_finite()
                && detect(&m, MetricKind::Prob).is_ok();
            Ok((
                ok,
                format!(
                    "toy smoke test (no checkpoint): 8 prompts, {} head×position rows",
                    m.targets.len()
                ),
            ))
        }
    }
}

fn toy_attn_only() -> Model {
    let mut cfg = ModelConfig::toy(4, 4, 16, 50257);
    cfg.attn_only = true;
    Model::new(cfg.clone(), Weights::random(&cfg, 21)).expect("toy model")
}

// ------------------------------------------------------------------ main

fn main() {
    let started = Instant::now();
    let strict = std::env::var("ACTPATCH_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut lines = vec![line(1, criterion_1)];

    let gpt2 = env_dir("ACTPATCH_GPT2_DIR").map(|d| load_dir(&d, true));
    match &gpt2 {
        Some(Ok(g)) => {
            let checks: [(u8, GptCheck); 6] = [
                (2, criterion_2),
                (3, criterion_3),
                (4, criterion_4),
                (5, criterion_5),
                (6, criterion_6),
                (7, criterion_7),
            ];
            for (id, f) in checks {
                lines.push(line(id, || f(g)));
            }
        }
        Some(Err(e)) => {
            for id in 2..=7 {
                lines.push(line(id, || Err(format!("cannot load GPT-2 small: {e}"))));
            }
        }
        None => {
            for id in 2..=7 {
                lines.push(blocked(
                    id,
                    "GPT-2 small weights not available (set ACTPATCH_GPT2_DIR)",
                ));
            }
        }
    }
    let small = gpt2.as_ref().and_then(|g| g.as_ref().ok());
    let mut eight = line(8, || criterion_8(small));
    if small.is_none() && matches!(eight.status, Status::Pass) {
        // The pipeline ran, but only on a stand-in model.
        eight.status = Status::Blocked;
    }
    lines.push(eight);
    lines.push(line(9, || {
        criterion_9(env_dir("ACTPATCH_ATTN_ONLY_DIR").as_deref())
    }));

    let mut failed = false;
    for l in &lines {
        let tag = match l.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed = true;
                "FAIL"
            }
            Status::Blocked => {
                failed |= strict;
                "BLOCKED"
            }
        };
        println!("criterion {}: {tag} - {}", l.id, l.detail);
    }
    println!(
        "acceptance finished in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    if failed {
        std::process::exit(1);
    }
}
