//! Questions, student responses and human labels as they come off disk.
//!
//! A question file carries the code being explained, the author-declared
//! signature lines and the few-shot exemplars that steer segmentation.
//! Responses come as JSONL (canonical) or CSV with the same headers.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::verify_portion;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 20;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {message}")]
    Json { path: PathBuf, message: String },
    #[error("{path}: missing field `{field}`")]
    MissingField { path: PathBuf, field: String },
    #[error("{path}: field `{field}`: {message}")]
    BadField {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: signature line {index} is outside 1..={line_count}")]
    BadLineIndex {
        path: PathBuf,
        index: i64,
        line_count: usize,
    },
    #[error("{path}: few_shot: {message}")]
    NoFewShot { path: PathBuf, message: String },
    #[error("{path}: {field}: explanation_portion {portion:?} does not occur in the exemplar explanation")]
    UnverifiedExemplar {
        path: PathBuf,
        field: String,
        portion: String,
    },
    #[error("{path}: duplicate question id `{id}`")]
    DuplicateQuestionId { path: PathBuf, id: String },
    #[error("{path}: record {record}: unknown label {label:?} (expected multistructural_correct, relational_correct or incorrect)")]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: String,
    },
    #[error("{path}: record {record}: duplicate response_id `{response_id}`")]
    DuplicateResponseId {
        path: PathBuf,
        record: usize,
        response_id: String,
    },
    #[error("{path}: record {record}: {message}")]
    BadRecord {
        path: PathBuf,
        record: usize,
        message: String,
    },
}

/// The two abstraction levels a segmentation can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Multistructural,
    Relational,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Multistructural => "multistructural",
            Level::Relational => "relational",
        }
    }

    pub fn other(self) -> Level {
        match self {
            Level::Multistructural => Level::Relational,
            Level::Relational => Level::Multistructural,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "multistructural" => Ok(Level::Multistructural),
            "relational" => Ok(Level::Relational),
            other => Err(format!("unknown level `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HumanLabel {
    #[serde(rename = "multistructural_correct")]
    MultistructuralCorrect,
    #[serde(rename = "relational_correct")]
    RelationalCorrect,
    #[serde(rename = "incorrect")]
    Incorrect,
}

impl HumanLabel {
    pub fn parse(s: &str) -> Option<HumanLabel> {
        match s.trim() {
            "multistructural_correct" => Some(HumanLabel::MultistructuralCorrect),
            "relational_correct" => Some(HumanLabel::RelationalCorrect),
            "incorrect" => Some(HumanLabel::Incorrect),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HumanLabel::MultistructuralCorrect => "multistructural_correct",
            HumanLabel::RelationalCorrect => "relational_correct",
            HumanLabel::Incorrect => "incorrect",
        }
    }

    /// Gold level for correct responses; `None` for `Incorrect`.
    pub fn level(self) -> Option<Level> {
        match self {
            HumanLabel::MultistructuralCorrect => Some(Level::Multistructural),
            HumanLabel::RelationalCorrect => Some(Level::Relational),
            HumanLabel::Incorrect => None,
        }
    }
}

/// One line of a code snippet. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeLine {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSnippet {
    pub raw: String,
    pub lines: Vec<CodeLine>,
    pub normalized_lines: Vec<String>,
}

impl CodeSnippet {
    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn line(&self, index: usize) -> Option<&CodeLine> {
        index.checked_sub(1).and_then(|i| self.lines.get(i))
    }

    pub fn normalized(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.normalized_lines.get(i))
            .map(String::as_str)
    }

    /// Whether the line carries something other than whitespace, braces or
    /// punctuation. Out-of-range indices are not substantive.
    pub fn is_substantive(&self, index: usize) -> bool {
        self.normalized(index).is_some_and(is_substantive_text)
    }

    /// Number of lines that count toward the feedback bar maximum.
    pub fn substantive_line_count(&self) -> usize {
        self.normalized_lines
            .iter()
            .filter(|l| is_substantive_text(l))
            .count()
    }

    pub fn joined(&self) -> String {
        self.lines
            .iter()
            .map(|l| l.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub(crate) fn is_substantive_text(normalized: &str) -> bool {
    normalized.chars().any(char::is_alphanumeric)
}

/// Splits raw code into 1-based lines. A single trailing newline does not
/// produce an extra empty line; `\r\n` endings are accepted.
pub fn split_lines(code: &str) -> CodeSnippet {
    let body = code.strip_suffix('\n').unwrap_or(code);
    let lines: Vec<CodeLine> = if code.is_empty() {
        Vec::new()
    } else {
        body.split('\n')
            .enumerate()
            .map(|(i, text)| CodeLine {
                index: i + 1,
                text: text.strip_suffix('\r').unwrap_or(text).to_string(),
            })
            .collect()
    };
    let normalized_lines = lines.iter().map(|l| normalize_line(&l.text)).collect();
    CodeSnippet {
        raw: code.to_string(),
        lines,
        normalized_lines,
    }
}

/// Trims the ends and collapses internal whitespace runs to one space.
pub fn normalize_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One `(code, explanation_portion)` pair as authored or returned by a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingPair {
    pub code: String,
    pub explanation_portion: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotExample {
    pub explanation: String,
    pub expected_mapping: Vec<MappingPair>,
    pub intended_level: Level,
}

#[derive(Debug, Clone)]
pub struct Question {
    pub id: String,
    pub title: String,
    pub code: String,
    pub language_tag: String,
    pub signature_line_indices: BTreeSet<usize>,
    pub few_shot: Vec<FewShotExample>,
    pub max_attempts: u32,
    /// Lines an author wants ignored by the optional `drop_lines` rule.
    pub drop_lines: BTreeSet<usize>,
    snippet: OnceLock<CodeSnippet>,
}

impl PartialEq for Question {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.title == other.title
            && self.code == other.code
            && self.language_tag == other.language_tag
            && self.signature_line_indices == other.signature_line_indices
            && self.few_shot == other.few_shot
            && self.max_attempts == other.max_attempts
            && self.drop_lines == other.drop_lines
    }
}

impl Question {
    pub fn snippet(&self) -> &CodeSnippet {
        self.snippet.get_or_init(|| split_lines(&self.code))
    }

    pub fn line_count(&self) -> usize {
        self.snippet().line_count()
    }
}

pub fn is_valid_id(id: &str) -> bool {
    static ID: OnceLock<Regex> = OnceLock::new();
    ID.get_or_init(|| Regex::new(r"^[A-Za-z0-9_-]+$").unwrap())
        .is_match(id)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// When `signature_lines` is absent, take the first line containing `(`
    /// and ending with `{` instead of failing.
    pub infer_signature: bool,
}

// On-disk question layout. Everything optional so missing fields can be
// reported by name rather than as a serde message.
#[derive(Deserialize)]
struct QuestionFile {
    id: Option<String>,
    title: Option<String>,
    language: Option<String>,
    code: Option<String>,
    signature_lines: Option<Vec<i64>>,
    max_attempts: Option<i64>,
    few_shot: Option<Vec<FewShotFile>>,
    #[serde(default)]
    drop_lines: Vec<i64>,
}

#[derive(Deserialize)]
struct FewShotFile {
    explanation: Option<String>,
    intended_level: Option<String>,
    groups: Option<Vec<GroupFile>>,
}

#[derive(Deserialize)]
struct GroupFile {
    code: Option<String>,
    explanation_portion: Option<String>,
}

pub fn load_question(path: &Path) -> Result<Question, CorpusError> {
    load_question_with(path, LoadOptions::default())
}

pub fn load_question_with(path: &Path, options: LoadOptions) -> Result<Question, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_question(&text, path, options)
}

/// Parses question JSON. `origin` is only used in error messages.
pub fn parse_question(text: &str, origin: &Path, options: LoadOptions) -> Result<Question, CorpusError> {
    let path = origin.to_path_buf();
    let file: QuestionFile = serde_json::from_str(text).map_err(|e| CorpusError::Json {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let missing = |field: &str| CorpusError::MissingField {
        path: path.clone(),
        field: field.to_string(),
    };
    let bad = |field: &str, message: String| CorpusError::BadField {
        path: path.clone(),
        field: field.to_string(),
        message,
    };

    let id = file.id.ok_or_else(|| missing("id"))?;
    if !is_valid_id(&id) {
        return Err(bad("id", format!("{id:?} must match [A-Za-z0-9_-]+")));
    }
    let title = file.title.ok_or_else(|| missing("title"))?;
    let code = file.code.ok_or_else(|| missing("code"))?;
    let snippet = split_lines(&code);
    let line_count = snippet.line_count();

    let check_index = |index: i64| -> Result<usize, CorpusError> {
        if index >= 1 && (index as usize) <= line_count {
            Ok(index as usize)
        } else {
            Err(CorpusError::BadLineIndex {
                path: path.clone(),
                index,
                line_count,
            })
        }
    };

    let signature_line_indices: BTreeSet<usize> = match file.signature_lines {
        Some(indices) => indices
            .into_iter()
            .map(check_index)
            .collect::<Result<_, _>>()?,
        None if options.infer_signature => infer_signature_line(&snippet)
            .map(|i| BTreeSet::from([i]))
            .ok_or_else(|| bad("signature_lines", "absent and no line looks like a signature".into()))?,
        None => return Err(missing("signature_lines")),
    };
    if signature_line_indices.is_empty() {
        return Err(bad("signature_lines", "must not be empty".into()));
    }

    let drop_lines = file
        .drop_lines
        .into_iter()
        .map(check_index)
        .collect::<Result<_, _>>()?;

    let max_attempts = match file.max_attempts {
        None => DEFAULT_MAX_ATTEMPTS,
        Some(n) if n >= 1 && n <= u32::MAX as i64 => n as u32,
        Some(n) => return Err(bad("max_attempts", format!("{n} is not a positive integer"))),
    };

    let few_shot_file = file.few_shot.ok_or_else(|| CorpusError::NoFewShot {
        path: path.clone(),
        message: "missing".into(),
    })?;
    let mut few_shot = Vec::with_capacity(few_shot_file.len());
    for (i, ex) in few_shot_file.into_iter().enumerate() {
        let at = |field: &str| format!("few_shot[{i}].{field}");
        let explanation = ex.explanation.ok_or_else(|| missing(&at("explanation")))?;
        let level_text = ex.intended_level.ok_or_else(|| missing(&at("intended_level")))?;
        let intended_level: Level = level_text
            .parse()
            .map_err(|m: String| bad(&at("intended_level"), m))?;
        let groups = ex.groups.ok_or_else(|| missing(&at("groups")))?;
        if groups.is_empty() {
            return Err(bad(&at("groups"), "must contain at least one group".into()));
        }
        let mut expected_mapping = Vec::with_capacity(groups.len());
        for (j, g) in groups.into_iter().enumerate() {
            let gat = |field: &str| format!("few_shot[{i}].groups[{j}].{field}");
            let code = g.code.ok_or_else(|| missing(&gat("code")))?;
            let explanation_portion = g
                .explanation_portion
                .ok_or_else(|| missing(&gat("explanation_portion")))?;
            if !verify_portion(&explanation_portion, &explanation) {
                return Err(CorpusError::UnverifiedExemplar {
                    path: path.clone(),
                    field: gat("explanation_portion"),
                    portion: explanation_portion,
                });
            }
            expected_mapping.push(MappingPair {
                code,
                explanation_portion,
            });
        }
        few_shot.push(FewShotExample {
            explanation,
            expected_mapping,
            intended_level,
        });
    }
    for level in [Level::Multistructural, Level::Relational] {
        if !few_shot.iter().any(|ex| ex.intended_level == level) {
            return Err(CorpusError::NoFewShot {
                path: path.clone(),
                message: format!("needs at least one {level} exemplar"),
            });
        }
    }

    let question = Question {
        id,
        title,
        code,
        language_tag: file.language.unwrap_or_default(),
        signature_line_indices,
        few_shot,
        max_attempts,
        drop_lines,
        snippet: OnceLock::new(),
    };
    let _ = question.snippet.set(snippet);
    Ok(question)
}

/// First line containing `(` whose trimmed text ends with `{`.
pub fn infer_signature_line(snippet: &CodeSnippet) -> Option<usize> {
    snippet
        .lines
        .iter()
        .find(|l| l.text.contains('(') && l.text.trim_end().ends_with('{'))
        .map(|l| l.index)
}

/// Loads every `*.json` file in a directory, keyed by question id.
pub fn load_question_dir(dir: &Path, options: LoadOptions) -> Result<BTreeMap<String, Question>, CorpusError> {
    let entries = std::fs::read_dir(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| CorpusError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut bank = BTreeMap::new();
    for p in paths {
        let q = load_question_with(&p, options)?;
        if bank.contains_key(&q.id) {
            return Err(CorpusError::DuplicateQuestionId { path: p, id: q.id });
        }
        bank.insert(q.id.clone(), q);
    }
    Ok(bank)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StudentResponse {
    pub question_id: String,
    pub response_id: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human_label: Option<HumanLabel>,
}

#[derive(Deserialize)]
struct ResponseRecord {
    question_id: Option<String>,
    response_id: Option<String>,
    text: Option<String>,
    #[serde(default)]
    human_label: Option<String>,
}

/// Loads responses from `.csv` (by extension) or JSONL (anything else).
pub fn load_responses(path: &Path) -> Result<Vec<StudentResponse>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        parse_responses_csv(&text, path)
    } else {
        parse_responses_jsonl(&text, path)
    }
}

pub fn parse_responses_jsonl(text: &str, origin: &Path) -> Result<Vec<StudentResponse>, CorpusError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResponseRecord = serde_json::from_str(line).map_err(|e| CorpusError::BadRecord {
            path: origin.to_path_buf(),
            record: i + 1,
            message: e.to_string(),
        })?;
        records.push((i + 1, rec));
    }
    finish_responses(records, origin)
}

pub fn parse_responses_csv(text: &str, origin: &Path) -> Result<Vec<StudentResponse>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::Headers)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<ResponseRecord>().enumerate() {
        // header is line 1
        let rec = row.map_err(|e| CorpusError::BadRecord {
            path: origin.to_path_buf(),
            record: i + 2,
            message: e.to_string(),
        })?;
        records.push((i + 2, rec));
    }
    finish_responses(records, origin)
}

fn finish_responses(records: Vec<(usize, ResponseRecord)>, origin: &Path) -> Result<Vec<StudentResponse>, CorpusError> {
    let path = origin.to_path_buf();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (record, rec) in records {
        let field = |name: &str, v: Option<String>| {
            v.ok_or_else(|| CorpusError::BadRecord {
                path: path.clone(),
                record,
                message: format!("missing `{name}`"),
            })
        };
        let question_id = field("question_id", rec.question_id)?;
        let response_id = field("response_id", rec.response_id)?;
        let text = field("text", rec.text)?;
        if text.trim().is_empty() {
            return Err(CorpusError::BadRecord {
                path,
                record,
                message: format!("response `{response_id}` has empty text"),
            });
        }
        let human_label = match rec.human_label.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(HumanLabel::parse(s).ok_or_else(|| CorpusError::BadLabel {
                path: path.clone(),
                record,
                label: s.to_string(),
            })?),
        };
        if !seen.insert(response_id.clone()) {
            return Err(CorpusError::DuplicateResponseId {
                path,
                record,
                response_id,
            });
        }
        out.push(StudentResponse {
            question_id,
            response_id,
            text,
            human_label,
        });
    }
    Ok(out)
}
