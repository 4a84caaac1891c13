use std::collections::HashMap;
use std::path::Path;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Provenance, RawMappingText};
use crate::prompting::SegmentationRequest;

/// Replays stored outputs keyed on `(question_id, sha256(response text))`.
///
/// When no fixture matches but the response is word-for-word one of the
/// request's few-shot explanations, the exemplar's own mapping is returned.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    fixtures: HashMap<(String, String), String>,
}

#[derive(Deserialize)]
struct FixtureRecord {
    question_id: String,
    #[serde(default)]
    response_text: Option<String>,
    #[serde(default)]
    response_sha256: Option<String>,
    #[serde(default)]
    mapping: Option<Value>,
    #[serde(default)]
    raw: Option<String>,
}

pub fn response_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixture(mut self, question_id: &str, response_text: &str, raw: impl Into<String>) -> Self {
        self.insert(question_id, response_text, raw);
        self
    }

    pub fn insert(&mut self, question_id: &str, response_text: &str, raw: impl Into<String>) {
        self.fixtures
            .insert((question_id.to_string(), response_hash(response_text)), raw.into());
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }

    /// Reads a JSONL fixture file. Each line names `question_id`, one of
    /// `response_text` / `response_sha256`, and one of `mapping` (a JSON
    /// value) / `raw` (verbatim output text, possibly malformed).
    pub fn from_jsonl(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let mut mock = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| BackendError::Config(format!("{}:{}: {m}", path.display(), i + 1));
            let rec: FixtureRecord = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
            let hash = match (rec.response_text, rec.response_sha256) {
                (Some(t), _) => response_hash(&t),
                (None, Some(h)) => h.to_ascii_lowercase(),
                (None, None) => return Err(bad("needs response_text or response_sha256")),
            };
            let raw = match (rec.raw, rec.mapping) {
                (Some(r), _) => r,
                (None, Some(m)) => serde_json::to_string_pretty(&m).expect("value serializes"),
                (None, None) => return Err(bad("needs mapping or raw")),
            };
            mock.fixtures.insert((rec.question_id, hash), raw);
        }
        Ok(mock)
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn complete(&self, request: &SegmentationRequest) -> Result<RawMappingText, BackendError> {
        let response = request.response_text();
        let key = (request.question_id.clone(), response_hash(response));
        if let Some(raw) = self.fixtures.get(&key) {
            return Ok(RawMappingText::new(raw.clone(), Provenance::mock()));
        }
        request
            .exemplars()
            .find(|(explanation, _)| explanation.trim() == response.trim())
            .map(|(_, mapping)| RawMappingText::new(mapping, Provenance::mock()))
            .ok_or_else(|| BackendError::MissingFixture {
                question_id: request.question_id.clone(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::build_request;
    use crate::testdata;
    use std::io::Write;

    #[tokio::test]
    async fn replays_exemplar_mapping() {
        let q = testdata::sum_of_positives();
        let req = build_request(&q, testdata::STEPWISE_EXPLANATION).unwrap();
        let out = MockBackend::new().complete(&req).await.unwrap();
        assert_eq!(out.text, testdata::STEPWISE_JSON);
        assert_eq!(out.provenance.backend, super::super::BackendKind::Mock);
    }

    #[tokio::test]
    async fn explicit_fixture_wins_and_misses_error() {
        let q = testdata::sum_of_positives();
        let mock = MockBackend::new().with_fixture("A-Q4", "adds numbers", "{\"groups\":[]}");
        let out = mock.complete(&build_request(&q, "adds numbers").unwrap()).await.unwrap();
        assert_eq!(out.text, "{\"groups\":[]}");
        let err = mock.complete(&build_request(&q, "something else").unwrap()).await.unwrap_err();
        assert!(matches!(err, BackendError::MissingFixture { .. }));
    }

    #[tokio::test]
    async fn loads_jsonl_fixtures() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"question_id":"A-Q4","response_text":"adds","mapping":{{"groups":[]}}}}"#).unwrap();
        writeln!(f, r#"{{"question_id":"A-Q4","response_sha256":"{}","raw":"{{oops"}}"#, response_hash("broken")).unwrap();
        let mock = MockBackend::from_jsonl(f.path()).unwrap();
        assert_eq!(mock.len(), 2);
        let q = testdata::sum_of_positives();
        let out = mock.complete(&build_request(&q, "broken").unwrap()).await.unwrap();
        assert_eq!(out.text, "{oops");
        let out = mock.complete(&build_request(&q, "adds").unwrap()).await.unwrap();
        assert_eq!(out.text, "{\n  \"groups\": []\n}");
    }
}
