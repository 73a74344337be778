// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt generators for the experimental settings.
//!
//! Every generator yields [`TaskPrompt`]s: a clean prompt with labelled spans,
//! its answer, and an in-distribution counterpart used for STR (and as the
//! source of `r'` under GN). [`build_pairs`] turns them into [`PromptPair`]s
//! for a given corruption.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corruption::{
    corrupt_abc, corrupt_gn, corrupt_str, draw_distinct, embedding_noise_scale, name_tokens,
    Answer, Corrupted, CorruptionMethod, CorruptionSpec, PromptPair,
};
use crate::error::{Error, Result};
use crate::model::{ForwardItem, ForwardOptions, LogitRows, Model, ModelInput};
use crate::tokenizer::{SpanLabel, TokenRange, TokenSequence, Vocab};

/// A clean prompt, its answer and its STR counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompt {
    pub clean: TokenSequence,
    pub answer: Answer,
    pub counterpart: TokenSequence,
}

/// Single-token first names.
pub const IOI_NAMES: &[&str] = &[
    "Aaron",
    "Adam",
    "Alan",
    "Alex",
    "Alice",
    "Amy",
    "Anderson",
    "Andre",
    "Andrew",
    "Andy",
    "Anna",
    "Anthony",
    "Arthur",
    "Austin",
    "Blake",
    "Brandon",
    "Brian",
    "Carter",
    "Charles",
    "Charlie",
    "Christian",
    "Christopher",
    "Clark",
    "Cole",
    "Collins",
    "Connor",
    "Crew",
    "Crystal",
    "Daniel",
    "David",
    "Dean",
    "Edward",
    "Elizabeth",
    "Emily",
    "Eric",
    "Eva",
    "Ford",
    "Frank",
    "George",
    "Georgia",
    "Graham",
    "Grant",
    "Henry",
    "Ian",
    "Jack",
    "Jacob",
    "Jake",
    "James",
    "Jamie",
    "Jane",
    "Jason",
    "Jay",
    "Jennifer",
    "Jeremy",
    "Jessica",
    "John",
    "Jonathan",
    "Jordan",
    "Joseph",
    "Joshua",
    "Justin",
    "Kate",
    "Kelly",
    "Kevin",
    "Kyle",
    "Laura",
    "Leon",
    "Lewis",
    "Lisa",
    "Louis",
    "Luke",
    "Madison",
    "Marco",
    "Marcus",
    "Maria",
    "Mark",
    "Martin",
    "Mary",
    "Matthew",
    "Max",
    "Michael",
    "Michelle",
    "Morgan",
    "Patrick",
    "Paul",
    "Peter",
    "Prince",
    "Rachel",
    "Richard",
    "River",
    "Robert",
    "Roman",
    "Rose",
    "Ruby",
    "Russell",
    "Ryan",
    "Sarah",
    "Scott",
    "Sean",
    "Simon",
    "Stephen",
    "Steven",
    "Sullivan",
    "Taylor",
    "Thomas",
    "Tyler",
    "Victoria",
    "Warren",
    "William",
];

pub const IOI_PLACES: &[&str] = &[
    "store",
    "garden",
    "restaurant",
    "school",
    "hospital",
    "office",
    "house",
    "station",
];

pub const IOI_OBJECTS: &[&str] = &[
    "ring",
    "kiss",
    "bone",
    "basketball",
    "computer",
    "necklace",
    "drink",
    "snack",
];

/// Templates in BABA order: `{S}` opens the sentence and reappears as S2.
/// The ABBA variant swaps the first `{S} and {IO}`.
pub const IOI_TEMPLATES: &[&str] = &[
    "When {S} and {IO} went to the {PLACE}, {S} gave a {OBJECT} to",
    "Then, {S} and {IO} went to the {PLACE}. {S} gave a {OBJECT} to",
    "Then, {S} and {IO} had a lot of fun at the {PLACE}. {S} gave a {OBJECT} to",
    "Then, {S} and {IO} were working at the {PLACE}. {S} decided to give a {OBJECT} to",
    "Then, {S} and {IO} were thinking about going to the {PLACE}. {S} wanted to give a {OBJECT} to",
    "Then, {S} and {IO} had a long argument, and afterwards {S} said to",
    "After {S} and {IO} went to the {PLACE}, {S} gave a {OBJECT} to",
    "When {S} and {IO} got a {OBJECT} at the {PLACE}, {S} decided to give it to",
    "When {S} and {IO} got a {OBJECT} at the {PLACE}, {S} decided to give the {OBJECT} to",
    "While {S} and {IO} were working at the {PLACE}, {S} gave a {OBJECT} to",
    "While {S} and {IO} were commuting to the {PLACE}, {S} gave a {OBJECT} to",
    "After the lunch, {S} and {IO} went to the {PLACE}. {S} gave a {OBJECT} to",
    "Afterwards, {S} and {IO} went to the {PLACE}. {S} gave a {OBJECT} to",
    "Then, {S} and {IO} had a long argument. Afterwards {S} said to",
    "The {PLACE} {S} and {IO} went to had a {OBJECT}. {S} gave it to",
    "Friends {S} and {IO} found a {OBJECT} at the {PLACE}. {S} gave it to",
];

/// Event nouns for greater-than prompts.
pub const GREATER_THAN_NOUNS: &[&str] = &[
    "abduction",
    "accord",
    "affair",
    "agreement",
    "appraisal",
    "assaults",
    "assessment",
    "attack",
    "attempts",
    "campaign",
    "captivity",
    "case",
    "challenge",
    "chaos",
    "clash",
    "collaboration",
    "coma",
    "competition",
    "confrontation",
    "consequence",
    "conspiracy",
    "construction",
    "consultation",
    "contact",
    "contract",
    "convention",
    "cooperation",
    "custody",
    "deal",
    "decline",
    "decrease",
    "demonstrations",
    "development",
    "disagreement",
    "disorder",
    "dispute",
    "domination",
    "dynasty",
    "effect",
    "effort",
    "employment",
    "endeavor",
    "engagement",
    "epidemic",
    "evaluation",
    "exchange",
    "existence",
    "expansion",
    "expedition",
    "experiments",
    "fall",
    "fame",
    "flights",
    "friendship",
    "growth",
    "hardship",
    "hostility",
    "illness",
    "impact",
    "imprisonment",
    "improvement",
    "incarceration",
    "increase",
    "insurgency",
    "invasion",
    "investigation",
    "journey",
    "kingdom",
    "marriage",
    "modernization",
    "negotiation",
    "notoriety",
    "obstruction",
    "operation",
    "order",
    "outbreak",
    "outcome",
    "overhaul",
    "patrols",
    "pilgrimage",
    "plague",
    "plan",
    "practice",
    "process",
    "program",
    "progress",
    "project",
    "pursuit",
    "quest",
    "raids",
    "reforms",
    "reign",
    "relationship",
    "retaliation",
    "riot",
    "rise",
    "rivalry",
    "romance",
    "rule",
    "sanctions",
    "shift",
    "siege",
    "slump",
    "stature",
    "stint",
    "strikes",
    "study",
    "test",
    "testing",
    "tests",
    "therapy",
    "tour",
    "tradition",
    "treaty",
    "trial",
    "trip",
    "unemployment",
    "voyage",
    "warfare",
    "work",
    "war",
];

/// Common words for docstring parameter names and filler.
pub const DOCSTRING_WORDS: &[&str] = &[
    "file", "data", "user", "name", "value", "count", "index", "item", "list", "key", "node",
    "path", "line", "word", "page", "time", "date", "size", "type", "mode", "text", "image",
    "color", "field", "table", "query", "result", "order", "state", "model", "token", "label",
    "group", "level", "point", "range", "score", "source", "target", "title", "total", "view",
    "window", "world", "block", "board", "book", "box", "case", "cell", "chain", "class", "code",
    "content", "context", "control", "current", "default", "device", "element", "entry", "error",
    "event", "form", "format", "frame", "function", "global", "handle", "header", "host", "input",
    "kind", "layer", "length", "limit", "link", "local", "lock", "log", "loop", "map", "match",
    "message", "method", "number", "object", "option", "output", "owner", "parent", "part", "port",
    "post", "prefix", "process", "project", "record", "request", "role", "root", "row", "rule",
    "scale", "scope", "section", "server", "session", "shape", "sign", "space", "stack", "status",
    "step", "store", "string", "style", "task", "test", "thread", "tree", "unit", "update",
    "version", "weight", "width", "action", "agent", "base", "bit", "body", "branch", "call",
    "change", "check", "client", "column", "comment", "file", "filter", "flag", "font", "game",
    "hash", "height", "image", "job", "lambda", "letter", "member", "menu", "mark", "note",
    "offset", "pair", "pattern", "player", "position", "queue", "reason", "region", "report",
    "resource", "sample", "schema", "search", "seed", "select", "signal", "site", "slot", "sort",
    "speed", "split", "start", "stream", "sum", "tag", "team", "template", "term", "timer", "tool",
    "track", "trial", "url", "week", "year", "zone",
];

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

/// Indices `i` with `ids[i] == tok`.
fn occurrences(ids: &[u32], tok: u32) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|&(_, &t)| t == tok)
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------- IOI

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IoiSpec {
    pub templates: Vec<String>,
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
    pub n_prompts: usize,
    pub seed: u64,
}

impl IoiSpec {
    pub fn with_defaults(n_prompts: usize, seed: u64) -> Self {
        Self {
            templates: owned(IOI_TEMPLATES),
            names: owned(IOI_NAMES),
            places: owned(IOI_PLACES),
            objects: owned(IOI_OBJECTS),
            n_prompts,
            seed,
        }
    }
}

fn fill_ioi(template: &str, abba: bool, s: &str, io: &str, place: &str, object: &str) -> String {
    let t = if abba {
        template.replacen("{S} and {IO}", "{IO} and {S}", 1)
    } else {
        template.to_string()
    };
    t.replace("{S}", s)
        .replace("{IO}", io)
        .replace("{PLACE}", place)
        .replace("{OBJECT}", object)
}

/// IOI prompts with S1, S2, IO spans. `str_targets` picks the counterpart:
/// `[S2]` writes IO over S2; `[S1, IO]` writes two fresh names over S1 and IO.
pub fn gen_ioi(
    spec: &IoiSpec,
    vocab: &Vocab,
    str_targets: &[SpanLabel],
) -> Result<Vec<TaskPrompt>> {
    let mode = ioi_str_mode(str_targets)?;
    let names = name_tokens(vocab, &spec.names);
    if names.len() < 4 {
        return Err(Error::Config(format!(
            "IOI needs at least 4 single-token names, {} survive filtering",
            names.len()
        )));
    }
    if spec.templates.is_empty() || spec.places.is_empty() || spec.objects.is_empty() {
        return Err(Error::Config(
            "IOI templates, places and objects must be non-empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_prompts);
    let mut attempts = 0;
    while out.len() < spec.n_prompts {
        attempts += 1;
        if attempts > 20 * spec.n_prompts + 100 {
            return Err(Error::Config(
                "IOI generation keeps failing to align spans".into(),
            ));
        }
        let template = spec.templates.choose(&mut rng).expect("non-empty");
        let abba = rng.random_bool(0.5);
        let pick = draw_distinct(&names, &[], 2, &mut rng)?;
        let (s, io) = (pick[0], pick[1]);
        let place = spec.places.choose(&mut rng).expect("non-empty");
        let object = spec.objects.choose(&mut rng).expect("non-empty");
        let s_str = vocab.decode(&[s])?;
        let io_str = vocab.decode(&[io])?;
        let text = fill_ioi(template, abba, s_str.trim(), io_str.trim(), place, object);
        let mut clean = vocab.encode(&text);
        let (s_pos, io_pos) = (occurrences(&clean.ids, s), occurrences(&clean.ids, io));
        if s_pos.len() != 2 || io_pos.len() != 1 {
            continue;
        }
        clean.set_span(SpanLabel::S1, TokenRange::single(s_pos[0]))?;
        clean.set_span(SpanLabel::S2, TokenRange::single(s_pos[1]))?;
        clean.set_span(SpanLabel::Io, TokenRange::single(io_pos[0]))?;
        let counterpart = match mode {
            IoiStr::S2 => corrupt_str(vocab, &clean, &[(SpanLabel::S2, vec![io])]),
            IoiStr::S1Io => {
                let fresh = draw_distinct(&names, &[s, io], 2, &mut rng)?;
                corrupt_str(
                    vocab,
                    &clean,
                    &[
                        (SpanLabel::S1, vec![fresh[0]]),
                        (SpanLabel::Io, vec![fresh[1]]),
                    ],
                )
            }
        };
        let Ok(counterpart) = counterpart else {
            continue;
        };
        out.push(TaskPrompt {
            clean,
            answer: Answer::Pair {
                correct: io,
                incorrect: s,
            },
            counterpart,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum IoiStr {
    S2,
    S1Io,
}

fn ioi_str_mode(targets: &[SpanLabel]) -> Result<IoiStr> {
    let mut t = targets.to_vec();
    t.sort();
    match t.as_slice() {
        [SpanLabel::S2] => Ok(IoiStr::S2),
        [SpanLabel::S1, SpanLabel::Io] => Ok(IoiStr::S1Io),
        _ => Err(Error::Config(format!(
            "IOI corrupts [S2] or [S1, IO], not {targets:?}"
        ))),
    }
}

// ---------------------------------------------------------------- facts

/// One record of a paired factual-recall file.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FactRecord {
    pub pair: [String; 2],
    pub answer: [String; 2],
    pub length: usize,
    pub category: String,
}

/// Why a record was dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

/// Validates records and emits both orientations of each accepted pair.
///
/// The subject span is what lies between the longest common token prefix and
/// the longest common token suffix of the two prompts. `length` may count a
/// leading BOS token (`n + 1`) or not (`n`); both prompts must have equal
/// token length either way.
pub fn fact_prompts(records: &[FactRecord], vocab: &Vocab) -> (Vec<TaskPrompt>, Vec<Rejection>) {
    let mut prompts = Vec::with_capacity(2 * records.len());
    let mut rejected = Vec::new();
    for (index, rec) in records.iter().enumerate() {
        match fact_pair(rec, vocab) {
            Ok([a, b]) => {
                prompts.push(a);
                prompts.push(b);
            }
            Err(e) => rejected.push(Rejection {
                index,
                reason: e.to_string(),
            }),
        }
    }
    (prompts, rejected)
}

fn fact_pair(rec: &FactRecord, vocab: &Vocab) -> Result<[TaskPrompt; 2]> {
    let a = vocab.encode(&rec.pair[0]);
    let b = vocab.encode(&rec.pair[1]);
    if a.len() != b.len() {
        return Err(Error::Alignment(format!(
            "prompts have {} and {} tokens",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if rec.length != n && rec.length != n + 1 {
        return Err(Error::Alignment(format!(
            "recorded length {} but prompts have {n} tokens",
            rec.length
        )));
    }
    let answer = |s: &str| {
        vocab
            .single_token(s)
            .ok_or_else(|| Error::Vocab(format!("answer {s:?} is not a single token")))
    };
    let (ra, rb) = (answer(&rec.answer[0])?, answer(&rec.answer[1])?);
    if ra == rb {
        return Err(Error::Config("both answers are the same token".into()));
    }
    let suffix = a
        .ids
        .iter()
        .rev()
        .zip(b.ids.iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    if suffix == 0 || suffix >= n {
        return Err(Error::Span(
            "prompts share no common suffix after distinct subjects".into(),
        ));
    }
    let prefix = a
        .ids
        .iter()
        .zip(&b.ids)
        .take_while(|(x, y)| x == y)
        .count()
        .min(n - suffix - 1);
    let subject = TokenRange::new(prefix, n - suffix);
    let mut a = a;
    let mut b = b;
    a.set_span(SpanLabel::Subject, subject)?;
    b.set_span(SpanLabel::Subject, subject)?;
    Ok([
        TaskPrompt {
            clean: a.clone(),
            answer: Answer::Pair {
                correct: ra,
                incorrect: rb,
            },
            counterpart: b.clone(),
        },
        TaskPrompt {
            clean: b,
            answer: Answer::Pair {
                correct: rb,
                incorrect: ra,
            },
            counterpart: a,
        },
    ])
}

// ---------------------------------------------------------------- greater-than

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GreaterThanSpec {
    pub nouns: Vec<String>,
    /// Inclusive century range for XX.
    pub centuries: (u32, u32),
    pub n_prompts: usize,
    pub seed: u64,
}

impl GreaterThanSpec {
    pub fn with_defaults(n_prompts: usize, seed: u64) -> Self {
        Self {
            nouns: owned(GREATER_THAN_NOUNS),
            centuries: (11, 17),
            n_prompts,
            seed,
        }
    }
}

/// Two-digit year tokens above and below `yy` (strict on both sides).
pub fn year_sets(vocab: &Vocab, yy: u32) -> (Vec<u32>, Vec<u32>) {
    let mut greater = Vec::new();
    let mut less = Vec::new();
    for y in 0..100u32 {
        if let Some(t) = vocab.single_token(&format!("{y:02}")) {
            if y > yy {
                greater.push(t);
            } else if y < yy {
                less.push(t);
            }
        }
    }
    (greater, less)
}

/// `"The {noun} lasted from the year XXYY to the year XX"`, YY in 02..=98.
pub fn gen_greater_than(spec: &GreaterThanSpec, vocab: &Vocab) -> Result<Vec<TaskPrompt>> {
    let nouns: Vec<&String> = spec
        .nouns
        .iter()
        .filter(|n| vocab.single_token(&format!(" {n}")).is_some())
        .collect();
    if nouns.is_empty() {
        return Err(Error::Config(
            "no single-token nouns for greater-than".into(),
        ));
    }
    let (lo, hi) = spec.centuries;
    if !(10..=99).contains(&lo) || hi < lo || hi > 99 {
        return Err(Error::Config(format!(
            "century range {lo}..={hi} is not two-digit"
        )));
    }
    let zero_one = vocab
        .single_token("01")
        .ok_or_else(|| Error::Vocab("\"01\" is not a single token".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_prompts);
    let mut attempts = 0;
    while out.len() < spec.n_prompts {
        attempts += 1;
        if attempts > 50 * spec.n_prompts + 100 {
            return Err(Error::Config("too few years tokenize as [XX][YY]".into()));
        }
        let noun = nouns.choose(&mut rng).expect("non-empty");
        let xx = rng.random_range(lo..=hi);
        let yy = rng.random_range(2..=98u32);
        let (Some(xx_tok), Some(yy_tok)) = (
            vocab.single_token(&format!(" {xx}")),
            vocab.single_token(&format!("{yy:02}")),
        ) else {
            continue;
        };
        if vocab.encode_ids(&format!(" {xx}{yy:02}")) != [xx_tok, yy_tok] {
            continue;
        }
        let text = format!("The {noun} lasted from the year {xx}{yy:02} to the year {xx}");
        let mut clean = vocab.encode(&text);
        let Some(pos) = clean.ids.windows(2).position(|w| w == [xx_tok, yy_tok]) else {
            continue;
        };
        clean.set_span(SpanLabel::Yy, TokenRange::single(pos + 1))?;
        let (greater, less) = year_sets(vocab, yy);
        if greater.is_empty() || less.is_empty() {
            continue;
        }
        let Ok(counterpart) = corrupt_str(vocab, &clean, &[(SpanLabel::Yy, vec![zero_one])]) else {
            continue;
        };
        out.push(TaskPrompt {
            clean,
            answer: Answer::Sets { greater, less },
            counterpart,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- docstring

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DocstringSpec {
    pub words: Vec<String>,
    pub n_prompts: usize,
    pub seed: u64,
}

impl DocstringSpec {
    pub fn with_defaults(n_prompts: usize, seed: u64) -> Self {
        Self {
            words: owned(DOCSTRING_WORDS),
            n_prompts,
            seed,
        }
    }
}

/// Words that are one token both with and without a leading space,
/// returned as `(bare, spaced)` ids with the word.
fn docstring_pool(vocab: &Vocab, words: &[String]) -> Vec<(String, u32)> {
    let mut pool: Vec<(String, u32)> = words
        .iter()
        .filter(|w| vocab.single_token(w).is_some())
        .filter_map(|w| vocab.single_token(&format!(" {w}")).map(|t| (w.clone(), t)))
        .collect();
    pool.sort();
    pool.dedup();
    pool
}

/// Docstring prompts ending in `:param`, answer ` C_def`.
pub fn gen_docstring(spec: &DocstringSpec, vocab: &Vocab) -> Result<Vec<TaskPrompt>> {
    let pool = docstring_pool(vocab, &spec.words);
    const NEEDED: usize = 15;
    if pool.len() < NEEDED {
        return Err(Error::Config(format!(
            "docstring needs {NEEDED} single-token words, {} available",
            pool.len()
        )));
    }
    let ids: Vec<u32> = (0..pool.len() as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_prompts);
    let mut attempts = 0;
    while out.len() < spec.n_prompts {
        attempts += 1;
        if attempts > 20 * spec.n_prompts + 100 {
            return Err(Error::Config(
                "docstring generation keeps failing to tokenize".into(),
            ));
        }
        let pick = draw_distinct(&ids, &[], NEEDED, &mut rng)?;
        let w = |i: usize| pool[pick[i] as usize].0.as_str();
        let (a, b, c) = (w(11), w(12), w(13));
        let text = format!(
            "def {}(self, {}, {}, {a}, {b}, {c}, {}):\n    \"\"\"{} {} {}\n\n    :param {a}: {} {}\n    :param {b}: {} {}\n    :param",
            w(0), w(1), w(2), w(3), w(4), w(5), w(6), w(7), w(8), w(9), w(10)
        );
        let mut clean = vocab.encode(&text);
        let c_tok = pool[pick[13] as usize].1;
        let occ = occurrences(&clean.ids, c_tok);
        if occ.len() != 1 {
            continue;
        }
        clean.set_span(SpanLabel::CDef, TokenRange::single(occ[0]))?;
        let fresh = pool[pick[14] as usize].1;
        let Ok(counterpart) = corrupt_str(vocab, &clean, &[(SpanLabel::CDef, vec![fresh])]) else {
            continue;
        };
        out.push(TaskPrompt {
            clean,
            answer: Answer::Pair {
                correct: c_tok,
                incorrect: fresh,
            },
            counterpart,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- arithmetic

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Operator {
    #[cfg_attr(feature = "serde", serde(rename = "+", alias = "add"))]
    Add,
    #[cfg_attr(feature = "serde", serde(rename = "-", alias = "sub"))]
    Sub,
    #[cfg_attr(feature = "serde", serde(rename = "*", alias = "mul", alias = "×"))]
    Mul,
}

impl Operator {
    pub const fn symbol(self) -> char {
        match self {
            Operator::Add => '+',
            Operator::Sub => '-',
            Operator::Mul => '*',
        }
    }

    /// Inclusive upper bound on operands.
    pub const fn max_operand(self) -> u32 {
        match self {
            Operator::Add | Operator::Sub => 250,
            Operator::Mul => 23,
        }
    }

    pub const fn apply(self, x: u32, y: u32) -> u32 {
        match self {
            Operator::Add => x + y,
            Operator::Sub => x - y,
            Operator::Mul => x * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArithmeticSpec {
    pub operator: Operator,
    /// Prompts drawn before filtering on model correctness.
    pub n_prompts: usize,
    pub seed: u64,
}

/// Operands `1..=max`; subtraction orders them so results stay non-negative.
/// Every operand and result must be a single token.
fn draw_expression(op: Operator, vocab: &Vocab, rng: &mut ChaCha8Rng) -> Option<(u32, u32, u32)> {
    for _ in 0..1000 {
        let mut x = rng.random_range(1..=op.max_operand());
        let mut y = rng.random_range(1..=op.max_operand());
        if op == Operator::Sub && x < y {
            core::mem::swap(&mut x, &mut y);
        }
        let z = op.apply(x, y);
        if [x, y, z]
            .iter()
            .all(|n| vocab.single_token(&n.to_string()).is_some())
        {
            return Some((x, y, z));
        }
    }
    None
}

/// Two-shot prompts `X1+Y1=Z1\nX2+Y2=Z2\nX3+Y3=`. Filter with
/// [`filter_model_correct`] before use.
pub fn gen_arithmetic(spec: &ArithmeticSpec, vocab: &Vocab) -> Result<Vec<TaskPrompt>> {
    let op = spec.operator;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tok = |n: u32| {
        vocab
            .single_token(&n.to_string())
            .expect("checked single token")
    };
    let mut out = Vec::with_capacity(spec.n_prompts);
    let mut attempts = 0;
    while out.len() < spec.n_prompts {
        attempts += 1;
        if attempts > 20 * spec.n_prompts + 100 {
            return Err(Error::Config(
                "arithmetic prompts keep failing to tokenize".into(),
            ));
        }
        let draws: Option<Vec<_>> = (0..3)
            .map(|_| draw_expression(op, vocab, &mut rng))
            .collect();
        let Some(d) = draws else {
            return Err(Error::Config(
                "no single-token arithmetic expressions".into(),
            ));
        };
        let sym = op.symbol();
        let text = format!(
            "{}{sym}{}={}\n{}{sym}{}={}\n{}{sym}{}=",
            d[0].0, d[0].1, d[0].2, d[1].0, d[1].1, d[1].2, d[2].0, d[2].1
        );
        let mut clean = vocab.encode(&text);
        let n = clean.len();
        let (x3, y3, z3) = d[2];
        if n < 4 || clean.ids[n - 4] != tok(x3) || clean.ids[n - 2] != tok(y3) {
            continue;
        }
        clean.set_span(SpanLabel::X3, TokenRange::single(n - 4))?;
        clean.set_span(SpanLabel::Y3, TokenRange::single(n - 2))?;
        let Some((x, y, z)) = (0..100)
            .filter_map(|_| draw_expression(op, vocab, &mut rng))
            .find(|&(_, _, z)| z != z3)
        else {
            continue;
        };
        let Ok(counterpart) = corrupt_str(
            vocab,
            &clean,
            &[(SpanLabel::X3, vec![tok(x)]), (SpanLabel::Y3, vec![tok(y)])],
        ) else {
            continue;
        };
        out.push(TaskPrompt {
            clean,
            answer: Answer::Pair {
                correct: tok(z3),
                incorrect: tok(z),
            },
            counterpart,
        });
    }
    Ok(out)
}

/// Keeps prompts whose clean top-1 prediction is the correct answer.
pub fn filter_model_correct(
    model: &Model,
    prompts: Vec<TaskPrompt>,
    batch: usize,
) -> Result<Vec<TaskPrompt>> {
    let mut keep = Vec::with_capacity(prompts.len());
    let opts = ForwardOptions {
        logits: LogitRows::Last,
        ..Default::default()
    };
    for chunk in prompts.chunks(batch.max(1)) {
        let items: Vec<ForwardItem<'_>> = chunk
            .iter()
            .map(|p| ForwardItem::new(ModelInput::Tokens(&p.clean.ids)))
            .collect();
        let records = model.forward_batch(&items, &opts)?;
        for (p, rec) in chunk.iter().zip(records) {
            let correct = match p.answer {
                Answer::Pair { correct, .. } => correct,
                Answer::Sets { .. } => continue,
            };
            if argmax(rec.final_logits()) == correct as usize {
                keep.push(p.clone());
            }
        }
    }
    Ok(keep)
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------- pairs

/// Corrupted pairs plus the noise scale used (0 unless GN).
#[derive(Debug, Clone)]
pub struct BuiltPairs {
    pub pairs: Vec<PromptPair>,
    pub nu: f64,
}

/// Applies a corruption to every prompt.
///
/// GN uses `ν = multiplier × SD` over the clean prompt set. ABC draws from
/// `abc_pool` (single-token name ids) and keeps `r`, `r'` of the clean prompt.
pub fn build_pairs(
    model: &Model,
    vocab: &Vocab,
    prompts: &[TaskPrompt],
    spec: &CorruptionSpec,
    abc_pool: &[u32],
) -> Result<BuiltPairs> {
    spec.validate()?;
    let mut nu = 0.0;
    if spec.method == CorruptionMethod::Gn {
        nu = embedding_noise_scale(
            prompts.iter().map(|p| p.clean.ids.as_slice()),
            model,
            spec.noise_scale_multiplier,
        )?;
    }
    let mut pairs = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let corrupt = match spec.method {
            CorruptionMethod::Str => Corrupted::Tokens(p.counterpart.clone()),
            CorruptionMethod::Gn => Corrupted::Noised {
                seq: p.clean.clone(),
                embedding: corrupt_gn(model, &p.clean, &spec.targets, nu, spec.seed, i as u64)?,
            },
            CorruptionMethod::Abc => {
                Corrupted::Tokens(corrupt_abc(vocab, &p.clean, abc_pool, spec.seed, i as u64)?)
            }
        };
        let pair = PromptPair {
            clean: p.clean.clone(),
            corrupt,
            answer: p.answer.clone(),
        };
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(BuiltPairs { pairs, nu })
}
