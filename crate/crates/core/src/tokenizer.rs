// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 byte-level BPE.
//!
//! Text is split with the GPT-2 pre-tokenization pattern
//! `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`
//! (hand-written below since the lookahead is not expressible in a plain
//! automaton), each piece is mapped byte-wise onto the 256-symbol printable
//! alphabet, and merges are applied in rank order.
//!
//! No special tokens are recognised and no BOS token is prepended.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// Half-open range of token indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenRange {
    pub start: usize,
    pub end: usize,
}

impl TokenRange {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub const fn single(pos: usize) -> Self {
        Self {
            start: pos,
            end: pos + 1,
        }
    }

    pub const fn len(&self) -> usize {
        self.end - self.start
    }

    pub const fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Index of the final token in the range.
    pub const fn last(&self) -> usize {
        self.end - 1
    }

    pub fn positions(&self) -> core::ops::Range<usize> {
        self.start..self.end
    }
}

/// Named key-token spans used by corruption and patching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SpanLabel {
    /// Factual-recall subject (possibly several tokens).
    #[cfg_attr(feature = "serde", serde(rename = "subject"))]
    Subject,
    /// First occurrence of the IOI subject.
    S1,
    /// Second occurrence of the IOI subject.
    S2,
    /// IOI indirect object.
    #[cfg_attr(feature = "serde", serde(rename = "IO"))]
    Io,
    /// Two-digit year suffix in greater-than prompts.
    #[cfg_attr(feature = "serde", serde(rename = "YY"))]
    Yy,
    /// Third parameter name in docstring prompts.
    #[cfg_attr(feature = "serde", serde(rename = "C_def"))]
    CDef,
    /// Final token of the prompt.
    #[cfg_attr(feature = "serde", serde(rename = "last"))]
    Last,
    /// First operand of the queried arithmetic expression.
    X3,
    /// Second operand of the queried arithmetic expression.
    Y3,
}

impl SpanLabel {
    pub const ALL: [SpanLabel; 9] = [
        SpanLabel::Subject,
        SpanLabel::S1,
        SpanLabel::S2,
        SpanLabel::Io,
        SpanLabel::Yy,
        SpanLabel::CDef,
        SpanLabel::Last,
        SpanLabel::X3,
        SpanLabel::Y3,
    ];

    pub const fn as_str(&self) -> &'static str {
        match self {
            SpanLabel::Subject => "subject",
            SpanLabel::S1 => "S1",
            SpanLabel::S2 => "S2",
            SpanLabel::Io => "IO",
            SpanLabel::Yy => "YY",
            SpanLabel::CDef => "C_def",
            SpanLabel::Last => "last",
            SpanLabel::X3 => "X3",
            SpanLabel::Y3 => "Y3",
        }
    }
}

impl fmt::Display for SpanLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpanLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SpanLabel::ALL
            .iter()
            .copied()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown span label {s:?}")))
    }
}

/// A tokenized prompt with labelled spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
    pub spans: BTreeMap<SpanLabel, TokenRange>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn span(&self, label: SpanLabel) -> Result<TokenRange> {
        self.spans
            .get(&label)
            .copied()
            .ok_or_else(|| Error::Span(format!("span {label} is not labelled in {:?}", self.text)))
    }

    /// Adds or replaces a span, checking it lies inside the sequence.
    pub fn set_span(&mut self, label: SpanLabel, range: TokenRange) -> Result<()> {
        if range.is_empty() || range.end > self.ids.len() {
            return Err(Error::Span(format!(
                "span {label} {}..{} outside sequence of length {}",
                range.start,
                range.end,
                self.ids.len()
            )));
        }
        self.spans.insert(label, range);
        Ok(())
    }

    /// Positions covered by any of `labels`, sorted and deduplicated.
    pub fn positions_of(&self, labels: &[SpanLabel]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &label in labels {
            out.extend(self.span(label)?.positions());
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// GPT-2 `bytes_to_unicode`: printable bytes map to themselves, the rest are
/// shifted to code points from 256 upwards.
fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut n = 0u32;
    for b in 0..256u32 {
        let printable =
            (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        let cp = if printable {
            b
        } else {
            n += 1;
            255 + n
        };
        table[b as usize] = char::from_u32(cp).expect("code points below 0x200 are valid");
    }
    table
}

/// Immutable GPT-2 vocabulary and merge table.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
    token_bytes: Vec<Vec<u8>>,
    byte_to_id: [u32; 256],
    /// `(left, right) -> (rank, merged)`.
    merges: BTreeMap<(u32, u32), (u32, u32)>,
    byte_encoder: [char; 256],
}

impl Vocab {
    /// Builds a vocabulary from a token map (`vocab.json` layout) and ordered
    /// merge pairs (`merges.txt` layout).
    pub fn new(token_to_id: BTreeMap<String, u32>, merges: &[(String, String)]) -> Result<Self> {
        let byte_encoder = byte_to_char_table();
        let mut byte_decoder = BTreeMap::new();
        for (b, &c) in byte_encoder.iter().enumerate() {
            byte_decoder.insert(c, b as u8);
        }

        let v = token_to_id.len();
        let mut id_to_token: Vec<Option<String>> = alloc::vec![None; v];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| {
                Error::Vocab(format!(
                    "id {id} of token {tok:?} is not below vocabulary size {v}"
                ))
            })?;
            if slot.is_some() {
                return Err(Error::Vocab(format!("id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .map(|t| t.expect("ids are dense: v distinct ids below v"))
            .collect();

        let mut token_bytes = Vec::with_capacity(v);
        for tok in &id_to_token {
            let bytes = tok
                .chars()
                .map(|c| {
                    byte_decoder.get(&c).copied().ok_or_else(|| {
                        Error::Vocab(format!(
                            "token {tok:?} contains non byte-level symbol {c:?}"
                        ))
                    })
                })
                .collect::<Result<Vec<u8>>>()?;
            token_bytes.push(bytes);
        }

        let mut byte_to_id = [0u32; 256];
        for (b, c) in byte_encoder.iter().enumerate() {
            let mut buf = [0u8; 4];
            let s: &str = c.encode_utf8(&mut buf);
            byte_to_id[b] = *token_to_id
                .get(s)
                .ok_or_else(|| Error::Vocab(format!("byte 0x{b:02x} has no token")))?;
        }

        let mut merge_map = BTreeMap::new();
        for (rank, (left, right)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                token_to_id.get(t).copied().ok_or_else(|| {
                    Error::Vocab(format!("merge {left:?} {right:?}: unknown token {t:?}"))
                })
            };
            let l = lookup(left)?;
            let r = lookup(right)?;
            let mut joined = String::with_capacity(left.len() + right.len());
            joined.push_str(left);
            joined.push_str(right);
            let merged = lookup(&joined)?;
            merge_map.entry((l, r)).or_insert((rank as u32, merged));
        }

        Ok(Self {
            token_to_id,
            id_to_token,
            token_bytes,
            byte_to_id,
            merges: merge_map,
            byte_encoder,
        })
    }

    /// Parses `merges.txt`: the first line is a header, each further
    /// non-empty line holds two space-separated tokens.
    pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    out.push((a.to_string(), b.to_string()));
                }
                _ => {
                    return Err(Error::Vocab(format!(
                        "merges line {}: expected two tokens, got {line:?}",
                        i + 1
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn n_merges(&self) -> usize {
        self.merges.len()
    }

    /// The 256-entry byte-to-symbol table.
    pub fn byte_encoder(&self) -> &[char; 256] {
        &self.byte_encoder
    }

    /// Id of a byte-level token string such as `"ĠParis"`.
    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_str(&self, id: u32) -> Result<&str> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| self.out_of_range(id))
    }

    /// Raw bytes a token decodes to.
    pub fn token_bytes(&self, id: u32) -> Result<&[u8]> {
        self.token_bytes
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| self.out_of_range(id))
    }

    fn out_of_range(&self, id: u32) -> Error {
        Error::Vocab(format!(
            "token id {id} out of range for vocabulary of {}",
            self.len()
        ))
    }

    /// Id of `text` if it encodes to exactly one token.
    pub fn single_token(&self, text: &str) -> Option<u32> {
        match self.encode_ids(text).as_slice() {
            [id] => Some(*id),
            _ => None,
        }
    }

    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in PreTokenizer::new(text) {
            self.bpe_into(piece.as_bytes(), &mut ids);
        }
        ids
    }

    /// Encodes `text`; the result carries a `last` span when non-empty.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let ids = self.encode_ids(text);
        let mut spans = BTreeMap::new();
        if !ids.is_empty() {
            spans.insert(SpanLabel::Last, TokenRange::single(ids.len() - 1));
        }
        TokenSequence {
            ids,
            text: text.to_string(),
            spans,
        }
    }

    /// Decodes ids to text; invalid UTF-8 byte runs become U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn bpe_into(&self, piece: &[u8], out: &mut Vec<u32>) {
        let mut word: Vec<u32> = piece.iter().map(|&b| self.byte_to_id[b as usize]).collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| {
                    self.merges
                        .get(&(w[0], w[1]))
                        .map(|&(rank, _)| (rank, w[0], w[1]))
                })
                .min();
            let Some((_, left, right)) = best else { break };
            let merged = self.merges[&(left, right)].1;
            let mut next = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == left && word[i + 1] == right {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(word[i]);
                    i += 1;
                }
            }
            word = next;
        }
        out.extend_from_slice(&word);
    }

    /// Byte offset at which each token starts, plus the total byte length.
    pub fn byte_offsets(&self, ids: &[u32]) -> Result<Vec<usize>> {
        let mut offsets = Vec::with_capacity(ids.len() + 1);
        let mut at = 0;
        offsets.push(0);
        for &id in ids {
            at += self.token_bytes(id)?.len();
            offsets.push(at);
        }
        Ok(offsets)
    }

    /// Token range covering exactly the bytes `start..end` of the decoded text.
    pub fn token_range_for_bytes(
        &self,
        ids: &[u32],
        start: usize,
        end: usize,
    ) -> Result<TokenRange> {
        let offsets = self.byte_offsets(ids)?;
        let first = offsets.iter().position(|&o| o == start);
        let last = offsets.iter().position(|&o| o == end);
        match (first, last) {
            (Some(s), Some(e)) if s < e => Ok(TokenRange::new(s, e)),
            _ => Err(Error::Alignment(format!(
                "bytes {start}..{end} do not fall on token boundaries"
            ))),
        }
    }

    /// Token range of the `occurrence`-th (1-based) match of `surface` in
    /// the sequence text.
    pub fn locate_span(
        &self,
        seq: &TokenSequence,
        surface: &str,
        occurrence: usize,
    ) -> Result<TokenRange> {
        if surface.is_empty() || occurrence == 0 {
            return Err(Error::Span(format!(
                "invalid span request {surface:?} occurrence {occurrence}"
            )));
        }
        let start = seq
            .text
            .match_indices(surface)
            .nth(occurrence - 1)
            .map(|(i, _)| i)
            .ok_or_else(|| {
                Error::Span(format!(
                    "occurrence {occurrence} of {surface:?} not found in {:?}",
                    seq.text
                ))
            })?;
        self.token_range_for_bytes(&seq.ids, start, start + surface.len())
            .map_err(|_| {
                Error::Alignment(format!(
                    "{surface:?} (occurrence {occurrence}) is not token-aligned in {:?}",
                    seq.text
                ))
            })
    }
}

fn is_letter(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::UppercaseLetter
            | GeneralCategory::LowercaseLetter
            | GeneralCategory::TitlecaseLetter
            | GeneralCategory::ModifierLetter
            | GeneralCategory::OtherLetter
    )
}

fn is_number(c: char) -> bool {
    c.is_numeric()
}

fn is_other(c: char) -> bool {
    !c.is_whitespace() && !is_letter(c) && !is_number(c)
}

/// Iterator over GPT-2 pre-tokenization pieces.
struct PreTokenizer<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> PreTokenizer<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    /// Byte length of the longest run of chars satisfying `pred` at `from`.
    fn run(&self, from: usize, pred: impl Fn(char) -> bool) -> usize {
        self.text[from..]
            .char_indices()
            .find(|&(_, c)| !pred(c))
            .map_or(self.text.len() - from, |(i, _)| i)
    }

    fn match_at(&self, at: usize) -> usize {
        let rest = &self.text[at..];
        let mut chars = rest.chars();
        let first = chars
            .next()
            .expect("match_at is only called before the end");

        if first == '\'' {
            for suffix in ["re", "ve", "ll", "s", "t", "m", "d"] {
                if rest[1..].starts_with(suffix) {
                    return 1 + suffix.len();
                }
            }
        }

        // ` ?\p{L}+`, ` ?\p{N}+`, ` ?[^\s\p{L}\p{N}]+`
        let (lead, body) = match (first, chars.next()) {
            (' ', Some(second)) => (1, second),
            _ => (0, first),
        };
        for class in [is_letter as fn(char) -> bool, is_number, is_other] {
            if class(body) {
                return lead + self.run(at + lead, class);
            }
        }

        // `\s+(?!\S)` then `\s+`
        let ws = self.run(at, char::is_whitespace);
        if at + ws == self.text.len() {
            return ws;
        }
        let last_ws = self.text[at..at + ws]
            .char_indices()
            .last()
            .map_or(0, |(i, _)| i);
        if last_ws > 0 {
            last_ws
        } else {
            ws
        }
    }
}

impl<'a> Iterator for PreTokenizer<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        if self.pos >= self.text.len() {
            return None;
        }
        let len = self.match_at(self.pos);
        let piece = &self.text[self.pos..self.pos + len];
        self.pos += len;
        Some(piece)
    }
}
