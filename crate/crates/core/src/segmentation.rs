//! Parsing and verification of model-produced segment mappings.
//!
//! The model returns `{"groups":[{"code","explanation_portion"}]}`. Each
//! group's code text is resolved back to snippet line indices and its
//! explanation portion is checked against what the student actually wrote.
//! Verification failures are recorded on the group, never fatal.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::backend::{Provenance, RawMappingText};
use crate::corpus::{normalize_line, CodeSnippet, MappingPair, Question};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    MalformedJson {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
}

impl ParseError {
    pub fn kind(&self) -> &'static str {
        match self {
            ParseError::MalformedJson { .. } => "MalformedJson",
            ParseError::SchemaViolation { .. } => "SchemaViolation",
        }
    }

    /// JSON path for schema errors, byte offset for syntax errors.
    pub fn location(&self) -> String {
        match self {
            ParseError::MalformedJson { offset, .. } => offset.to_string(),
            ParseError::SchemaViolation { path, .. } => path.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentGroup {
    #[serde(rename = "code")]
    pub code_text: String,
    pub explanation_portion: String,
    #[serde(rename = "lines")]
    pub resolved_lines: BTreeSet<usize>,
    pub portion_verified: bool,
    pub lines_verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMapping {
    pub groups: Vec<SegmentGroup>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SegmentMapping {
    pub fn raw_count(&self) -> usize {
        self.groups.len()
    }

    pub fn pairs(&self) -> Vec<MappingPair> {
        self.groups
            .iter()
            .map(|g| MappingPair {
                code: g.code_text.clone(),
                explanation_portion: g.explanation_portion.clone(),
            })
            .collect()
    }
}

#[derive(Serialize)]
struct CanonicalMapping<'a> {
    groups: &'a [MappingPair],
}

/// Two-space indented `{"groups":[...]}` with `code` before
/// `explanation_portion`.
pub fn canonical_json(pairs: &[MappingPair]) -> String {
    serde_json::to_string_pretty(&CanonicalMapping { groups: pairs }).expect("mapping serializes")
}

/// Validates `text` against the mapping schema and returns the pairs in
/// output order.
pub fn parse_pairs(text: &str) -> Result<Vec<MappingPair>, ParseError> {
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(text, &e))?;
    let root = expect_object(&value, "$")?;
    check_keys(root, "$", &["groups"])?;
    let groups = root
        .get("groups")
        .ok_or_else(|| violation("$", "missing key `groups`"))?;
    let groups = groups
        .as_array()
        .ok_or_else(|| violation("$.groups", format!("expected array, found {}", type_name(groups))))?;
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let path = format!("$.groups[{i}]");
            let obj = expect_object(g, &path)?;
            check_keys(obj, &path, &["code", "explanation_portion"])?;
            let field = |key: &str| -> Result<String, ParseError> {
                let v = obj
                    .get(key)
                    .ok_or_else(|| violation(&path, format!("missing key `{key}`")))?;
                v.as_str().map(str::to_string).ok_or_else(|| {
                    violation(format!("{path}.{key}"), format!("expected string, found {}", type_name(v)))
                })
            };
            Ok(MappingPair {
                code: field("code")?,
                explanation_portion: field("explanation_portion")?,
            })
        })
        .collect()
}

pub fn parse_mapping(raw: &RawMappingText, question: &Question, response_text: &str) -> Result<SegmentMapping, ParseError> {
    let pairs = parse_pairs(&raw.text)?;
    Ok(build_mapping(&pairs, question.snippet(), response_text, raw.provenance.clone()))
}

/// Resolves and verifies already-validated pairs.
pub fn build_mapping(pairs: &[MappingPair], snippet: &CodeSnippet, response_text: &str, provenance: Provenance) -> SegmentMapping {
    let mut warnings = Vec::new();
    let groups = pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let (resolved_lines, lines_verified) = resolve_code_lines(&pair.code, snippet);
            let portion_verified = verify_portion(&pair.explanation_portion, response_text);
            if !portion_verified {
                warnings.push(format!(
                    "group {i}: explanation portion {:?} is not in the response",
                    pair.explanation_portion
                ));
            }
            if !lines_verified {
                warnings.push(format!("group {i}: code {:?} does not match the snippet", pair.code));
            }
            SegmentGroup {
                code_text: pair.code.clone(),
                explanation_portion: pair.explanation_portion.clone(),
                resolved_lines,
                portion_verified,
                lines_verified,
            }
        })
        .collect();
    SegmentMapping {
        groups,
        provenance,
        warnings,
    }
}

/// Maps each non-empty line of `code_text` to the earliest snippet line with
/// the same normalized text not already taken by this group.
pub fn resolve_code_lines(code_text: &str, snippet: &CodeSnippet) -> (BTreeSet<usize>, bool) {
    let mut taken = BTreeSet::new();
    let mut any = false;
    let mut all = true;
    for line in code_text.lines() {
        let wanted = normalize_line(line);
        if wanted.is_empty() {
            continue;
        }
        any = true;
        let found = snippet
            .normalized_lines
            .iter()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .find(|(index, l)| **l == wanted && !taken.contains(index));
        match found {
            Some((index, _)) => {
                taken.insert(index);
            }
            None => all = false,
        }
    }
    (taken, any && all)
}

/// True when the portion, with surrounding punctuation trimmed, occurs
/// verbatim in the response modulo case and whitespace.
pub fn verify_portion(portion: &str, response_text: &str) -> bool {
    let needle = portion_key(portion);
    !needle.is_empty() && normalize_line(response_text).to_lowercase().contains(&needle)
}

fn portion_key(portion: &str) -> String {
    normalize_line(portion.trim_matches(|c: char| !c.is_alphanumeric()))
        .to_lowercase()
}

/// Char offsets `[start, end)` of the first occurrence of `portion` in
/// `text` under the same matching rules as [`verify_portion`].
pub fn locate_portion(portion: &str, text: &str) -> Option<(usize, usize)> {
    let needle: Vec<char> = portion_key(portion).chars().collect();
    if needle.is_empty() {
        return None;
    }
    // normalized haystack alongside the original char index of each char
    let mut hay: Vec<char> = Vec::new();
    let mut origin: Vec<usize> = Vec::new();
    let mut pending_space: Option<usize> = None;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if !hay.is_empty() && pending_space.is_none() {
                pending_space = Some(i);
            }
            continue;
        }
        if let Some(sp) = pending_space.take() {
            hay.push(' ');
            origin.push(sp);
        }
        for lc in c.to_lowercase() {
            hay.push(lc);
            origin.push(i);
        }
    }
    let start = hay.windows(needle.len()).position(|w| w == needle.as_slice())?;
    let last = start + needle.len() - 1;
    Some((origin[start], origin[last] + 1))
}

fn malformed(text: &str, e: &serde_json::Error) -> ParseError {
    let line = e.line();
    let column = e.column();
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    ParseError::MalformedJson {
        offset: (line_start + column.saturating_sub(1)).min(text.len()),
        line,
        column,
        message: e.to_string(),
    }
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> ParseError {
    ParseError::SchemaViolation {
        path: path.into(),
        message: message.into(),
    }
}

fn expect_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, ParseError> {
    v.as_object()
        .ok_or_else(|| violation(path, format!("expected object, found {}", type_name(v))))
}

fn check_keys(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<(), ParseError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(extra) => Err(violation(format!("{path}.{extra}"), format!("unexpected key `{extra}`"))),
        None => Ok(()),
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}
