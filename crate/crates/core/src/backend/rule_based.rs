use std::collections::BTreeSet;

use async_trait::async_trait;

use super::{Backend, BackendError, Provenance, RawMappingText};
use crate::corpus::{MappingPair, Question};
use crate::prompting::SegmentationRequest;
use crate::segmentation::canonical_json;

/// Offline baseline: clause-by-clause token-overlap alignment. Not a model
/// of how an LLM segments, but deterministic and free.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedBackend;

#[async_trait]
impl Backend for RuleBasedBackend {
    async fn complete(&self, request: &SegmentationRequest) -> Result<RawMappingText, BackendError> {
        let code = request
            .messages
            .first()
            .and_then(|m| m.content.split_once("Here is the code:\n"))
            .map(|(_, code)| code)
            .unwrap_or("");
        let pairs = align(code, request.response_text());
        Ok(RawMappingText::new(canonical_json(&pairs), Provenance::rule_based()))
    }
}

pub fn rule_based_segment(question: &Question, response_text: &str) -> RawMappingText {
    RawMappingText::new(
        canonical_json(&align(&question.code, response_text)),
        Provenance::rule_based(),
    )
}

fn align(code: &str, response_text: &str) -> Vec<MappingPair> {
    let lines: Vec<(&str, BTreeSet<String>)> = code
        .lines()
        .map(|l| (l.trim(), tokens(l)))
        .collect();

    // (byte span in the response, best line) per clause with any overlap
    let mut aligned: Vec<((usize, usize), usize)> = Vec::new();
    for span in clauses(response_text) {
        let clause = tokens(&response_text[span.0..span.1]);
        if clause.is_empty() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, (_, line)) in lines.iter().enumerate() {
            let score = jaccard(&clause, line);
            if score > 0.0 && best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        if let Some((line, _)) = best {
            aligned.push((span, line));
        }
    }

    let mut pairs: Vec<MappingPair> = Vec::new();
    let mut last: Option<(usize, usize)> = None; // (line, start of merged span)
    for ((start, end), line) in aligned {
        match last {
            Some((prev_line, merged_start)) if prev_line == line => {
                let portion = response_text[merged_start..end].trim();
                pairs.last_mut().expect("merged group exists").explanation_portion = portion.to_string();
            }
            _ => {
                pairs.push(MappingPair {
                    code: lines[line].0.to_string(),
                    explanation_portion: response_text[start..end].trim().to_string(),
                });
                last = Some((line, start));
            }
        }
    }
    pairs
}

/// Byte spans of clauses separated by `.`, `;` or `!`, trimmed.
fn clauses(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | ';' | '!') {
            push_trimmed(text, start, i, &mut out);
            start = i + c.len_utf8();
        }
    }
    push_trimmed(text, start, text.len(), &mut out);
    out
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<(usize, usize)>) {
    let piece = &text[start..end];
    let lead = piece.len() - piece.trim_start().len();
    let trimmed = piece.trim();
    if !trimmed.is_empty() {
        out.push((start + lead, start + lead + trimmed.len()));
    }
}

/// Lowercased alphanumeric runs; small number words become digits so that
/// "zero" meets `0`.
fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let t = t.to_lowercase();
            number_word(&t).map(str::to_string).unwrap_or(t)
        })
        .collect()
}

fn number_word(word: &str) -> Option<&'static str> {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    const DIGITS: [&str; 11] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10"];
    WORDS.iter().position(|w| *w == word).map(|i| DIGITS[i])
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}
