//! Prompt segmentation into ordered semantic units.
//!
//! Two stages: a rule splitter (blank lines, headers, list items, sentence
//! boundaries, delimiters) followed by refinement that merges short
//! fragments and splits run-on units. An optional parser may propose its own
//! unit boundaries; a proposal is only accepted when it reconstructs the
//! prompt losslessly up to whitespace.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, GenerationParams, ModelBackend, ModelRequest};

/// Neutral placeholder substituted for an occluded unit.
pub const MASK_TOKEN: &str = "[…]";

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("cannot segment an empty prompt")]
    EmptyPrompt,
    #[error("parser proposal rejected: {0}")]
    ProposalRejected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Header,
    ListItem,
    Sentence,
    DelimiterBlock,
}

/// Stable identity of a unit's text across iterations.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(String);

impl Fingerprint {
    pub fn of(text: &str) -> Self {
        let digest = Sha256::digest(normalize_ws(text).as_bytes());
        Fingerprint(hex::encode(&digest[..8]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Collapses every whitespace run to a single space and trims the ends.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticUnit {
    pub index: usize,
    pub text: String,
    pub kind: UnitKind,
    pub fingerprint: Fingerprint,
}

impl SemanticUnit {
    pub fn new(index: usize, text: impl Into<String>, kind: UnitKind) -> Self {
        let text = text.into();
        let fingerprint = Fingerprint::of(&text);
        Self {
            index,
            text,
            kind,
            fingerprint,
        }
    }

    fn chars(&self) -> usize {
        self.text.trim().chars().count()
    }

    fn is_mask(&self) -> bool {
        self.text.trim() == MASK_TOKEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub units: Vec<SemanticUnit>,
    pub source_prompt: String,
}

impl Segmentation {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Units joined with single newlines.
    pub fn reassemble(&self) -> String {
        join_units(self.units.iter().map(|u| u.text.as_str()))
    }

    pub fn is_lossless(&self) -> bool {
        normalize_ws(&self.reassemble()) == normalize_ws(&self.source_prompt)
    }

    pub fn position(&self, fingerprint: &Fingerprint) -> Option<usize> {
        self.units.iter().position(|u| &u.fingerprint == fingerprint)
    }
}

pub fn join_units<'a>(texts: impl IntoIterator<Item = &'a str>) -> String {
    texts.into_iter().collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub min_unit_chars: usize,
    pub max_unit_chars: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            min_unit_chars: 12,
            max_unit_chars: 400,
        }
    }
}

fn list_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[-*+•]|\d+[.)])\s+\S").unwrap())
}

fn md_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^#{1,6}\s+\S").unwrap())
}

fn bold_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:\*\*[^*].*\*\*|__[^_].*__):?$").unwrap())
}

enum Line<'a> {
    Blank,
    Rule(&'a str),
    Fence(&'a str),
    Mask,
    Header(&'a str),
    Item(&'a str),
    Text(&'a str),
}

fn is_rule(t: &str) -> bool {
    let compact: Vec<char> = t.chars().filter(|c| !c.is_whitespace()).collect();
    compact.len() >= 3
        && matches!(compact[0], '-' | '*' | '_' | '=')
        && compact.iter().all(|&c| c == compact[0])
}

fn is_colon_header(t: &str) -> bool {
    t.ends_with(':')
        && t.chars().count() <= 60
        && !t.contains(". ")
        && !t.contains("? ")
        && !t.contains("! ")
}

fn classify(raw: &str) -> Line<'_> {
    let t = raw.trim();
    if t.is_empty() {
        Line::Blank
    } else if t == MASK_TOKEN {
        Line::Mask
    } else if t.starts_with("```") {
        Line::Fence(t)
    } else if is_rule(t) {
        Line::Rule(t)
    } else if list_re().is_match(t) {
        Line::Item(t)
    } else if md_header_re().is_match(t) || bold_header_re().is_match(t) || is_colon_header(t) {
        Line::Header(t)
    } else {
        Line::Text(t)
    }
}

const ABBREVIATIONS: &[&str] = &["e.g", "i.e", "etc", "vs", "mr", "mrs", "ms", "dr", "st", "no", "fig", "approx"];

fn ends_with_abbreviation(before: &str) -> bool {
    let word = before
        .rsplit(|c: char| c.is_whitespace() || c == '(')
        .next()
        .unwrap_or("")
        .to_ascii_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Splits a paragraph at terminal punctuation followed by whitespace and an
/// uppercase start.
fn split_sentences(paragraph: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = paragraph.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | ')' | '"' | '\'' | '’' | '”' | ']') {
                j += 1;
            }
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let opens_upper = k < chars.len()
                && k > j
                && (chars[k].1.is_uppercase()
                    || (matches!(chars[k].1, '"' | '\'' | '“' | '‘' | '(')
                        && chars.get(k + 1).is_some_and(|(_, n)| n.is_uppercase())));
            if opens_upper && !(c == '.' && ends_with_abbreviation(&paragraph[start..pos])) {
                let end = chars[j - 1].0 + chars[j - 1].1.len_utf8();
                out.push(paragraph[start..end].trim());
                start = chars[k].0;
                i = k;
                continue;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    let tail = paragraph[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Rule-based first stage of segmentation.
pub fn rule_split(prompt: &str) -> Result<Vec<SemanticUnit>, SegmentError> {
    if prompt.trim().is_empty() {
        return Err(SegmentError::EmptyPrompt);
    }
    let mut pieces: Vec<(String, UnitKind)> = Vec::new();
    let mut paragraph: Vec<&str> = Vec::new();
    let mut fence: Option<Vec<&str>> = None;

    fn flush(paragraph: &mut Vec<&str>, pieces: &mut Vec<(String, UnitKind)>) {
        if paragraph.is_empty() {
            return;
        }
        let joined = paragraph.join("\n");
        for s in split_sentences(&joined) {
            pieces.push((s.to_string(), UnitKind::Sentence));
        }
        paragraph.clear();
    }

    for raw in prompt.lines() {
        if let Some(block) = fence.as_mut() {
            block.push(raw);
            if raw.trim().starts_with("```") {
                pieces.push((block.join("\n").trim().to_string(), UnitKind::DelimiterBlock));
                fence = None;
            }
            continue;
        }
        match classify(raw) {
            Line::Text(t) => paragraph.push(t),
            other => {
                flush(&mut paragraph, &mut pieces);
                match other {
                    Line::Blank => {}
                    Line::Rule(t) => pieces.push((t.to_string(), UnitKind::DelimiterBlock)),
                    Line::Fence(t) => fence = Some(vec![t]),
                    Line::Mask => pieces.push((MASK_TOKEN.to_string(), UnitKind::Sentence)),
                    Line::Header(t) => pieces.push((t.to_string(), UnitKind::Header)),
                    Line::Item(t) => pieces.push((t.to_string(), UnitKind::ListItem)),
                    Line::Text(_) => unreachable!(),
                }
            }
        }
    }
    flush(&mut paragraph, &mut pieces);
    if let Some(block) = fence {
        pieces.push((block.join("\n").trim().to_string(), UnitKind::DelimiterBlock));
    }
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(i, (text, kind))| SemanticUnit::new(i, text, kind))
        .collect())
}

/// Proposes unit boundaries; used for model-assisted refinement.
pub trait UnitParser {
    fn propose(&self, units: &[SemanticUnit]) -> Result<Vec<String>, BackendError>;
}

/// Asks a model to regroup units, expecting a JSON array of strings back.
pub struct ModelUnitParser<'a> {
    pub backend: &'a dyn ModelBackend,
    pub params: GenerationParams,
}

const PARSER_INSTRUCTION: &str = "You split instructions into semantically coherent units. \
Merge fragments that are too short to stand alone and split run-on clauses. \
Do not add, drop or reword any text. Reply with a JSON array of strings only.";

impl UnitParser for ModelUnitParser<'_> {
    fn propose(&self, units: &[SemanticUnit]) -> Result<Vec<String>, BackendError> {
        let texts: Vec<&str> = units.iter().map(|u| u.text.as_str()).collect();
        let input = serde_json::to_string(&texts).unwrap_or_default();
        let reply = self
            .backend
            .complete(&ModelRequest::text(PARSER_INSTRUCTION, input, self.params.clone()))?;
        let schema = |message: &str| BackendError::Schema {
            backend: self.backend.name().to_string(),
            message: message.to_string(),
        };
        let (start, end) = match (reply.find('['), reply.rfind(']')) {
            (Some(s), Some(e)) if s < e => (s, e),
            _ => return Err(schema("no JSON array in parser reply")),
        };
        serde_json::from_str(&reply[start..=end]).map_err(|e| schema(&e.to_string()))
    }
}

fn kind_of(text: &str) -> UnitKind {
    match classify(text.lines().next().unwrap_or("")) {
        Line::Header(_) => UnitKind::Header,
        Line::Item(_) => UnitKind::ListItem,
        Line::Rule(_) | Line::Fence(_) => UnitKind::DelimiterBlock,
        _ => UnitKind::Sentence,
    }
}

/// Validates a parser proposal against the lossless-reconstruction invariant.
pub fn accept_proposal(original: &[SemanticUnit], proposal: &[String]) -> Result<Vec<SemanticUnit>, SegmentError> {
    if proposal.is_empty() {
        return Err(SegmentError::ProposalRejected("empty proposal".into()));
    }
    if let Some(i) = proposal.iter().position(|t| t.trim().is_empty()) {
        return Err(SegmentError::ProposalRejected(format!("unit {i} is empty")));
    }
    let before = normalize_ws(&join_units(original.iter().map(|u| u.text.as_str())));
    let after = normalize_ws(&join_units(proposal.iter().map(String::as_str)));
    if before != after {
        return Err(SegmentError::ProposalRejected("text does not reconstruct the prompt".into()));
    }
    Ok(proposal
        .iter()
        .enumerate()
        .map(|(i, t)| SemanticUnit::new(i, t.trim(), kind_of(t.trim())))
        .collect())
}

fn merge_text(first: &SemanticUnit, second: &SemanticUnit) -> String {
    let sep = if first.kind == UnitKind::Sentence && second.kind == UnitKind::Sentence {
        " "
    } else {
        "\n"
    };
    format!("{}{sep}{}", first.text, second.text)
}

fn merge_short(units: Vec<SemanticUnit>, min_chars: usize) -> Vec<SemanticUnit> {
    let mut out: Vec<SemanticUnit> = Vec::with_capacity(units.len());
    let mut pending: Option<SemanticUnit> = None;
    for unit in units {
        if unit.is_mask() {
            if let Some(p) = pending.take() {
                out.push(p);
            }
            out.push(unit);
            continue;
        }
        let unit = match pending.take() {
            Some(p) => SemanticUnit::new(0, merge_text(&p, &unit), unit.kind),
            None => unit,
        };
        if unit.chars() >= min_chars {
            out.push(unit);
            continue;
        }
        match out.last_mut() {
            Some(prev) if !prev.is_mask() => *prev = SemanticUnit::new(0, merge_text(prev, &unit), prev.kind),
            _ => pending = Some(unit),
        }
    }
    if let Some(p) = pending {
        out.push(p);
    }
    out
}

fn split_point(text: &str, min_chars: usize) -> Option<usize> {
    let total = text.chars().count();
    let mid = total / 2;
    let fits = |at: usize| {
        text[..at].trim().chars().count() >= min_chars && text[at..].trim().chars().count() >= min_chars
    };
    let nearest = |candidates: Vec<usize>| {
        candidates
            .into_iter()
            .filter(|&b| fits(b))
            .min_by_key(|&b| text[..b].chars().count().abs_diff(mid))
    };
    let mut clause = Vec::new();
    let mut space = Vec::new();
    let mut prev: Option<char> = None;
    for (pos, c) in text.char_indices() {
        if c.is_whitespace() {
            if matches!(prev, Some(',' | ';' | ':')) {
                clause.push(pos);
            }
            space.push(pos);
        }
        prev = Some(c);
    }
    nearest(clause).or_else(|| nearest(space))
}

fn split_long(unit: SemanticUnit, cfg: &SegmenterConfig, out: &mut Vec<SemanticUnit>) {
    if unit.chars() <= cfg.max_unit_chars {
        out.push(unit);
        return;
    }
    match split_point(&unit.text, cfg.min_unit_chars) {
        Some(at) => {
            let head = SemanticUnit::new(0, unit.text[..at].trim(), unit.kind);
            let tail_kind = if unit.kind == UnitKind::DelimiterBlock {
                UnitKind::DelimiterBlock
            } else {
                UnitKind::Sentence
            };
            let tail = SemanticUnit::new(0, unit.text[at..].trim(), tail_kind);
            split_long(head, cfg, out);
            split_long(tail, cfg, out);
        }
        None => out.push(unit),
    }
}

fn reindex(units: Vec<SemanticUnit>) -> Vec<SemanticUnit> {
    units
        .into_iter()
        .enumerate()
        .map(|(i, mut u)| {
            u.index = i;
            u
        })
        .collect()
}

/// Rule fallback refinement: merge fragments below `min_unit_chars`, then
/// split units above `max_unit_chars` at clause boundaries.
pub fn refine_rules(units: Vec<SemanticUnit>, cfg: &SegmenterConfig) -> Vec<SemanticUnit> {
    let merged = merge_short(units, cfg.min_unit_chars);
    let mut out = Vec::with_capacity(merged.len());
    for u in merged {
        split_long(u, cfg, &mut out);
    }
    reindex(out)
}

/// Second stage of segmentation. A parser proposal that fails the
/// reconstruction check is logged and replaced by the rule fallback.
pub fn refine(units: Vec<SemanticUnit>, cfg: &SegmenterConfig, parser: Option<&dyn UnitParser>) -> Vec<SemanticUnit> {
    if let Some(parser) = parser {
        match parser.propose(&units) {
            Ok(proposal) => match accept_proposal(&units, &proposal) {
                Ok(accepted) => return accepted,
                Err(e) => log::warn!("{e}; using rule refinement"),
            },
            Err(e) => log::warn!("unit parser failed: {e}; using rule refinement"),
        }
    }
    refine_rules(units, cfg)
}

pub fn segment(prompt: &str, cfg: &SegmenterConfig, parser: Option<&dyn UnitParser>) -> Result<Segmentation, SegmentError> {
    let units = refine(rule_split(prompt)?, cfg, parser);
    Ok(Segmentation {
        units,
        source_prompt: prompt.to_string(),
    })
}
