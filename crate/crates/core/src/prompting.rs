//! Prompt rendering and answer parsing.
//!
//! Prompts are plain text: an instruction header listing the label set,
//! then `Text:`/`Answer:` blocks. Demonstration answers use the same
//! single-quoted map-list format the model is asked to emit, e.g.
//! `[{'white house': 'Location'}, {'president': 'Person'}]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{dedup_pairs, normalize_span, EntityPair, LabelSet};
use crate::error::{Error, Result};

pub const INSTRUCTION_HEADER: &str = "Given entity label set: {labels}.\nPlease recognize the named entities in the given text. Based on the given entity label set, provide answer in the following JSON format: ";
pub const ANSWER_FORMAT_CLAUSE: &str = "[{'Entity Name': 'Entity Label'}].";
pub const EMPTY_LIST_CLAUSE: &str = " If there is no entity in the text, return the following empty list: [].";
pub const EXAMPLE_BLOCK: &str = "Text: {text}\nAnswer: ";
pub const SV_QUESTION: &str = "How confident are you in providing the above answers? Please give each named entity in your answer a confidence score of 0-5.";

/// Separator between the header and each `Text:`/`Answer:` block.
const BLOCK_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Instruction text with a `{labels}` slot.
    pub instruction_header: String,
    pub answer_format_clause: String,
    pub empty_list_clause: String,
    /// One input/output block with a `{text}` slot; the answer follows it.
    pub example_block: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            instruction_header: INSTRUCTION_HEADER.into(),
            answer_format_clause: ANSWER_FORMAT_CLAUSE.into(),
            empty_list_clause: EMPTY_LIST_CLAUSE.into(),
            example_block: EXAMPLE_BLOCK.into(),
        }
    }
}

impl PromptTemplate {
    /// Parse an override file: the header (with `{labels}`) and the example
    /// block (with `{text}`) are separated by the first blank line.
    pub fn from_override(text: &str) -> Result<Self> {
        let (header, block) = text
            .split_once(BLOCK_SEPARATOR)
            .ok_or_else(|| Error::Config("prompt override needs a blank line between header and text block".into()))?;
        if !header.contains("{labels}") {
            return Err(Error::Config("prompt override header lacks a {labels} slot".into()));
        }
        if !block.contains("{text}") {
            return Err(Error::Config("prompt override text block lacks a {text} slot".into()));
        }
        Ok(PromptTemplate {
            instruction_header: header.to_string(),
            answer_format_clause: String::new(),
            empty_list_clause: String::new(),
            example_block: block.trim_end_matches('\n').to_string(),
        })
    }

    pub fn load_override(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_override(&text)
    }

    pub fn header(&self, labelset: &LabelSet) -> String {
        let mut out = self
            .instruction_header
            .replace("{labels}", &render_label_list(labelset));
        out.push_str(&self.answer_format_clause);
        out.push_str(&self.empty_list_clause);
        out
    }

    fn block(&self, text: &str) -> String {
        self.example_block.replace("{text}", text)
    }

    pub fn zero_shot(&self, labelset: &LabelSet, text: &str) -> String {
        self.icl::<&str>(labelset, &[], text)
    }

    pub fn icl<S: AsRef<str>>(&self, labelset: &LabelSet, demos: &[(S, Vec<EntityPair>)], query: &str) -> String {
        let mut out = self.header(labelset);
        for (text, answer) in demos {
            out.push_str(BLOCK_SEPARATOR);
            out.push_str(&self.block(text.as_ref()));
            out.push_str(&serialize_answer(answer));
        }
        out.push_str(BLOCK_SEPARATOR);
        out.push_str(&self.block(query));
        out
    }

    /// Recover the query text from a prompt rendered with this template.
    pub fn extract_query<'a>(&self, prompt: &'a str) -> Option<&'a str> {
        let (prefix, suffix) = self.example_block.split_once("{text}")?;
        let body = prompt.strip_suffix(suffix)?;
        let start = body.rfind(prefix)? + prefix.len();
        Some(&body[start..])
    }
}

/// `['Person', 'Organization']`
pub fn render_label_list(labelset: &LabelSet) -> String {
    let quoted: Vec<String> = labelset.types.iter().map(|t| format!("'{t}'")).collect();
    format!("[{}]", quoted.join(", "))
}

pub fn build_zero_shot_prompt(labelset: &LabelSet, text: &str) -> String {
    PromptTemplate::default().zero_shot(labelset, text)
}

pub fn build_icl_prompt<S: AsRef<str>>(labelset: &LabelSet, demos: &[(S, Vec<EntityPair>)], query: &str) -> String {
    PromptTemplate::default().icl(labelset, demos, query)
}

/// Canonical single-quoted answer serialization.
pub fn serialize_answer(pairs: &[EntityPair]) -> String {
    let items: Vec<String> = pairs
        .iter()
        .map(|(span, etype)| format!("{{'{span}': '{etype}'}}"))
        .collect();
    format!("[{}]", items.join(", "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Recovered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseResult {
    pub predictions: Vec<EntityPair>,
    pub status: ParseStatus,
}

struct Cursor {
    chars: Vec<char>,
    pos: usize,
    recovered: bool,
    pairs: Vec<EntityPair>,
}

impl Cursor {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    /// A closing quote only ends the string when the next non-blank
    /// character is structural; otherwise it is an apostrophe in the text.
    fn closes_string(&self, at: usize) -> bool {
        self.chars[at + 1..]
            .iter()
            .find(|c| !c.is_whitespace())
            .is_none_or(|c| matches!(c, ':' | ',' | '}' | ']'))
    }

    fn string(&mut self) -> String {
        let quote = self.chars[self.pos];
        self.pos += 1;
        let mut out = String::new();
        while let Some(c) = self.peek() {
            if c == '\\' {
                if let Some(&next) = self.chars.get(self.pos + 1) {
                    out.push(next);
                    self.pos += 2;
                    continue;
                }
            }
            if c == quote && self.closes_string(self.pos) {
                self.pos += 1;
                return out;
            }
            out.push(c);
            self.pos += 1;
        }
        self.recovered = true;
        out
    }

    fn skip_bare(&mut self) {
        while let Some(c) = self.peek() {
            if matches!(c, ',' | '}' | ']') {
                break;
            }
            self.pos += 1;
        }
    }

    fn map(&mut self) {
        self.pos += 1;
        loop {
            self.skip_ws();
            match self.peek() {
                None => {
                    self.recovered = true;
                    return;
                }
                Some('}') => {
                    self.pos += 1;
                    return;
                }
                Some(']') => {
                    self.recovered = true;
                    return;
                }
                Some(',') => self.pos += 1,
                Some('\'' | '"') => {
                    let key = self.string();
                    self.skip_ws();
                    if self.peek() != Some(':') {
                        self.recovered = true;
                        continue;
                    }
                    self.pos += 1;
                    self.skip_ws();
                    match self.peek() {
                        Some('\'' | '"') => {
                            let value = self.string();
                            let span = normalize_span(&key);
                            if span.is_empty() {
                                self.recovered = true;
                            } else {
                                self.pairs.push((span, normalize_span(&value)));
                            }
                        }
                        _ => {
                            self.recovered = true;
                            self.skip_bare();
                        }
                    }
                }
                Some(_) => {
                    self.recovered = true;
                    self.pos += 1;
                }
            }
        }
    }
}

/// Parse a model answer. Never fails: problems are reported in the status.
pub fn parse_answer(raw: &str) -> ParseResult {
    let chars: Vec<char> = raw.chars().collect();
    let Some(start) = chars.iter().position(|&c| c == '[') else {
        return ParseResult {
            predictions: Vec::new(),
            status: ParseStatus::Failed,
        };
    };
    let mut cur = Cursor {
        recovered: chars[..start].iter().any(|c| !c.is_whitespace()),
        chars,
        pos: start + 1,
        pairs: Vec::new(),
    };
    let mut closed = false;
    loop {
        cur.skip_ws();
        match cur.peek() {
            None => break,
            Some(']') => {
                cur.pos += 1;
                closed = true;
                break;
            }
            Some(',') => cur.pos += 1,
            Some('{') => cur.map(),
            Some('\'' | '"') => {
                cur.recovered = true;
                cur.string();
            }
            Some(_) => {
                cur.recovered = true;
                cur.pos += 1;
            }
        }
    }
    if closed && cur.chars[cur.pos..].iter().any(|c| !c.is_whitespace()) {
        cur.recovered = true;
    }
    let predictions = dedup_pairs(cur.pairs);
    let status = if !closed && predictions.is_empty() {
        ParseStatus::Failed
    } else if !closed || cur.recovered {
        ParseStatus::Recovered
    } else {
        ParseStatus::Ok
    };
    ParseResult { predictions, status }
}

/// Append the self-verification question to a prompt and the answer the
/// model gave to it.
pub fn build_sv_prompt(prompt: &str, answer: &str) -> String {
    format!("{prompt}{answer}{BLOCK_SEPARATOR}{SV_QUESTION}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SvParse {
    pub scores: Vec<u8>,
    /// Set when the entity was not found (score defaulted to 0) or its
    /// score was clamped into 0..=5.
    pub flags: Vec<bool>,
    pub status: ParseStatus,
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

fn find_unclaimed(hay: &str, needle: &str, claimed: &[(usize, usize)]) -> Option<(usize, usize)> {
    hay.match_indices(needle)
        .map(|(i, _)| (i, i + needle.len()))
        .find(|r| claimed.iter().all(|c| !overlaps(*r, *c)))
}

/// Extract one 0..=5 confidence score per prediction by locating the span
/// and reading the nearest integer after it.
pub fn parse_sv_answer(raw: &str, predictions: &[EntityPair]) -> SvParse {
    let lower = raw.to_ascii_lowercase();
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(predictions[i].0.len()));

    let mut located: Vec<Option<(usize, usize)>> = vec![None; predictions.len()];
    let mut claimed = Vec::new();
    for i in order {
        let span = &predictions[i].0;
        if span.is_empty() {
            continue;
        }
        let hit = find_unclaimed(raw, span, &claimed)
            .or_else(|| find_unclaimed(&lower, &span.to_ascii_lowercase(), &claimed));
        if let Some(r) = hit {
            claimed.push(r);
            located[i] = Some(r);
        }
    }

    let bytes = raw.as_bytes();
    let mut scores = Vec::with_capacity(predictions.len());
    let mut flags = Vec::with_capacity(predictions.len());
    for loc in &located {
        let Some((_, end)) = *loc else {
            scores.push(0);
            flags.push(true);
            continue;
        };
        let limit = claimed
            .iter()
            .map(|c| c.0)
            .filter(|&s| s >= end)
            .min()
            .unwrap_or(bytes.len());
        let digits_at = (end..limit).find(|&j| bytes[j].is_ascii_digit());
        match digits_at {
            None => {
                scores.push(0);
                flags.push(true);
            }
            Some(j) => {
                let run: String = bytes[j..limit]
                    .iter()
                    .take_while(|b| b.is_ascii_digit())
                    .map(|&b| b as char)
                    .collect();
                let value: u64 = run.parse().unwrap_or(u64::MAX);
                if value > 5 {
                    scores.push(5);
                    flags.push(true);
                } else {
                    scores.push(value as u8);
                    flags.push(false);
                }
            }
        }
    }
    let status = if flags.iter().any(|&f| f) {
        ParseStatus::Recovered
    } else {
        ParseStatus::Ok
    };
    SvParse { scores, flags, status }
}
