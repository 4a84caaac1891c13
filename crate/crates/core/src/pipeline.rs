//! Post-processing rules, threshold classification, and the end-to-end
//! grading flow for one response.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::corpus::{CodeSnippet, HumanLabel, Level, Question, StudentResponse};
use crate::prompting::{build_request, PromptError};
use crate::segmentation::{parse_mapping, ParseError, SegmentMapping};

pub const DEFAULT_THRESHOLD: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("threshold must be at least 1, got {0}")]
pub struct BadThreshold(pub u32);

/// Responses with more than `threshold` segments are multi-structural.
pub fn classify(post_count: usize, threshold: u32) -> Result<Level, BadThreshold> {
    if threshold < 1 {
        return Err(BadThreshold(threshold));
    }
    Ok(if post_count > threshold as usize {
        Level::Multistructural
    } else {
        Level::Relational
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostRule {
    /// Drop groups whose substantive lines are all signature lines.
    SignatureOnly,
    /// Drop groups whose substantive lines are all in the question's
    /// author-listed `drop_lines`.
    DropLines,
}

impl PostRule {
    pub fn name(self) -> &'static str {
        match self {
            PostRule::SignatureOnly => "signature_only",
            PostRule::DropLines => "drop_lines",
        }
    }

    pub fn apply(self, mapping: &SegmentMapping, question: &Question) -> SegmentMapping {
        match self {
            PostRule::SignatureOnly => remove_signature_only_groups(mapping, question),
            PostRule::DropLines => remove_groups_within(mapping, question.snippet(), &question.drop_lines),
        }
    }
}

impl std::str::FromStr for PostRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "signature_only" | "signature" => Ok(PostRule::SignatureOnly),
            "drop_lines" => Ok(PostRule::DropLines),
            other => Err(format!("unknown rule `{other}` (signature_only, drop_lines)")),
        }
    }
}

pub fn default_rules() -> Vec<PostRule> {
    vec![PostRule::SignatureOnly]
}

pub fn remove_signature_only_groups(mapping: &SegmentMapping, question: &Question) -> SegmentMapping {
    remove_groups_within(mapping, question.snippet(), &question.signature_line_indices)
}

/// Removes a group when its resolved lines, ignoring blank and
/// punctuation-only lines, are non-empty and all inside `lines`.
fn remove_groups_within(mapping: &SegmentMapping, snippet: &CodeSnippet, lines: &BTreeSet<usize>) -> SegmentMapping {
    let groups = mapping
        .groups
        .iter()
        .filter(|g| {
            let mut substantive = g.resolved_lines.iter().filter(|&&i| snippet.is_substantive(i)).peekable();
            let inside = substantive.peek().is_some() && substantive.all(|i| lines.contains(i));
            !inside
        })
        .cloned()
        .collect();
    SegmentMapping {
        groups,
        provenance: mapping.provenance.clone(),
        warnings: mapping.warnings.clone(),
    }
}

pub fn apply_rules(mapping: &SegmentMapping, rules: &[PostRule], question: &Question) -> SegmentMapping {
    rules
        .iter()
        .fold(mapping.clone(), |m, rule| rule.apply(&m, question))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub response_id: String,
    pub question_id: String,
    pub raw_count: usize,
    pub post_count: usize,
    pub threshold: u32,
    pub level: Level,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_label: Option<HumanLabel>,
    pub post_mapping: SegmentMapping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub rules: Vec<PostRule>,
    pub threshold: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rules: default_rules(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradeFailure {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Threshold(#[from] BadThreshold),
}

impl GradeFailure {
    pub fn kind(&self) -> &'static str {
        match self {
            GradeFailure::Prompt(_) => "EmptyResponse",
            GradeFailure::Backend(e) => match e {
                BackendError::Transport(_) => "Transport",
                BackendError::RateLimited { .. } => "RateLimited",
                BackendError::SchemaRefused(_) => "SchemaRefused",
                BackendError::Rejected { .. } => "Rejected",
                BackendError::Exhausted { .. } => "Exhausted",
                BackendError::MissingFixture { .. } => "MissingFixture",
                BackendError::Config(_) => "Config",
            },
            GradeFailure::Parse(e) => e.kind(),
            GradeFailure::Threshold(_) => "BadThreshold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("response `{response_id}`: {failure}")]
pub struct GradeError {
    pub response_id: String,
    pub failure: GradeFailure,
}

pub async fn grade_response(
    question: &Question,
    response: &StudentResponse,
    backend: &dyn Backend,
    config: &PipelineConfig,
) -> Result<ClassificationResult, GradeError> {
    let tag = |failure: GradeFailure| GradeError {
        response_id: response.response_id.clone(),
        failure,
    };
    classify(0, config.threshold).map_err(|e| tag(e.into()))?;
    let request = build_request(question, &response.text).map_err(|e| tag(e.into()))?;
    let raw = backend.complete(&request).await.map_err(|e| tag(e.into()))?;
    let mapping = parse_mapping(&raw, question, &response.text).map_err(|e| tag(e.into()))?;
    Ok(classify_mapping(question, response, mapping, config))
}

/// Applies the rule chain and threshold to an already parsed mapping.
pub fn classify_mapping(
    question: &Question,
    response: &StudentResponse,
    mapping: SegmentMapping,
    config: &PipelineConfig,
) -> ClassificationResult {
    let raw_count = mapping.raw_count();
    let post_mapping = apply_rules(&mapping, &config.rules, question);
    let post_count = post_mapping.raw_count();
    let mut warnings = mapping.warnings.clone();
    if raw_count == 0 {
        warnings.push("backend returned no segments; classified relational".into());
    } else if post_count == 0 {
        warnings.push(format!(
            "post-processing removed all {raw_count} segments; classified relational"
        ));
    }
    let level = classify(post_count, config.threshold).expect("threshold validated by caller");
    ClassificationResult {
        response_id: response.response_id.clone(),
        question_id: question.id.clone(),
        raw_count,
        post_count,
        threshold: config.threshold,
        level,
        warnings,
        human_label: response.human_label,
        post_mapping,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, Provenance, RawMappingText};
    use crate::segmentation::SegmentGroup;
    use crate::testdata;
    use proptest::prelude::*;

    fn parsed(json: &str, text: &str) -> SegmentMapping {
        let q = testdata::sum_of_positives();
        parse_mapping(&RawMappingText::new(json, Provenance::mock()), &q, text).unwrap()
    }

    fn response(text: &str) -> StudentResponse {
        StudentResponse {
            question_id: "A-Q4".into(),
            response_id: "r1".into(),
            text: text.into(),
            human_label: None,
        }
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(6, 2), Ok(Level::Multistructural));
        assert_eq!(classify(1, 1), Ok(Level::Relational));
        assert_eq!(classify(2, 2), Ok(Level::Relational));
        assert_eq!(classify(0, 1), Ok(Level::Relational));
        assert_eq!(classify(3, 0), Err(BadThreshold(0)));
    }

    #[test]
    fn signature_removal_on_exemplars() {
        let q = testdata::sum_of_positives();
        let a = parsed(testdata::STEPWISE_JSON, testdata::STEPWISE_EXPLANATION);
        let removed = remove_signature_only_groups(&a, &q);
        assert_eq!(removed.raw_count(), 5);
        assert_eq!(removed.groups[..], a.groups[1..]);

        let b = parsed(testdata::SUMMARY_JSON, testdata::SUMMARY_EXPLANATION);
        assert_eq!(remove_signature_only_groups(&b, &q), b);

        let empty = parsed("{\"groups\":[]}", "x");
        assert_eq!(remove_signature_only_groups(&empty, &q).raw_count(), 0);
    }

    #[test]
    fn signature_plus_closing_brace_still_signature_only() {
        let q = testdata::sum_of_positives();
        let mut m = parsed(testdata::STEPWISE_JSON, testdata::STEPWISE_EXPLANATION);
        m.groups[0].resolved_lines.insert(9);
        assert_eq!(remove_signature_only_groups(&m, &q).raw_count(), 5);
        // a group that resolved nothing is kept
        m.groups[0].resolved_lines.clear();
        assert_eq!(remove_signature_only_groups(&m, &q).raw_count(), 6);
    }

    #[test]
    fn rule_chain() {
        let q = testdata::sum_of_positives();
        let a = parsed(testdata::STEPWISE_JSON, testdata::STEPWISE_EXPLANATION);
        assert_eq!(apply_rules(&a, &[], &q), a);
        let once = apply_rules(&a, &[PostRule::SignatureOnly], &q);
        assert_eq!(once.raw_count(), 5);
        assert_eq!(apply_rules(&a, &[PostRule::SignatureOnly, PostRule::SignatureOnly], &q), once);
    }

    #[test]
    fn drop_lines_rule_uses_question_lines() {
        let mut q = testdata::sum_of_positives();
        q.drop_lines = BTreeSet::from([8]);
        let a = parsed(testdata::STEPWISE_JSON, testdata::STEPWISE_EXPLANATION);
        let out = apply_rules(&a, &[PostRule::DropLines], &q);
        assert_eq!(out.raw_count(), 5);
        assert!(out.groups.iter().all(|g| !g.resolved_lines.contains(&8)));
        let both = apply_rules(&a, &[PostRule::SignatureOnly, PostRule::DropLines], &q);
        assert_eq!(both.raw_count(), 4);
    }

    #[tokio::test]
    async fn grade_exemplars() {
        let q = testdata::sum_of_positives();
        let mock = MockBackend::new();
        let on = PipelineConfig::default();
        let off = PipelineConfig {
            rules: vec![],
            threshold: 1,
        };

        let b = grade_response(&q, &response(testdata::SUMMARY_EXPLANATION), &mock, &on).await.unwrap();
        assert_eq!((b.raw_count, b.post_count, b.level), (1, 1, Level::Relational));
        assert!(b.warnings.is_empty());

        let a = grade_response(&q, &response(testdata::STEPWISE_EXPLANATION), &mock, &on).await.unwrap();
        assert_eq!((a.raw_count, a.post_count, a.level), (6, 5, Level::Multistructural));

        let a = grade_response(&q, &response(testdata::STEPWISE_EXPLANATION), &mock, &off).await.unwrap();
        assert_eq!((a.raw_count, a.post_count, a.level), (6, 6, Level::Multistructural));
    }

    #[tokio::test]
    async fn grade_errors_are_tagged() {
        let q = testdata::sum_of_positives();
        let mock = MockBackend::new().with_fixture("A-Q4", "broken", "{\"groups\":");
        let err = grade_response(&q, &response("broken"), &mock, &PipelineConfig::default())
            .await
            .unwrap_err();
        assert_eq!(err.response_id, "r1");
        assert_eq!(err.failure.kind(), "MalformedJson");

        let err = grade_response(&q, &response("unknown"), &mock, &PipelineConfig::default())
            .await
            .unwrap_err();
        assert_eq!(err.failure.kind(), "MissingFixture");

        let bad = PipelineConfig {
            rules: vec![],
            threshold: 0,
        };
        let err = grade_response(&q, &response("broken"), &mock, &bad).await.unwrap_err();
        assert_eq!(err.failure, GradeFailure::Threshold(BadThreshold(0)));
    }

    #[tokio::test]
    async fn signature_only_response_warns() {
        let q = testdata::sum_of_positives();
        let text = "input is values with array and length";
        let json = r#"{"groups":[{"code":"int sumOfPositives(int arr[], int size) {","explanation_portion":"input is values with array and length"}]}"#;
        let mock = MockBackend::new().with_fixture("A-Q4", text, json);
        let r = grade_response(&q, &response(text), &mock, &PipelineConfig::default()).await.unwrap();
        assert_eq!((r.raw_count, r.post_count, r.level), (1, 0, Level::Relational));
        assert_eq!(r.warnings.len(), 1);
    }

    fn random_mapping() -> impl Strategy<Value = SegmentMapping> {
        proptest::collection::vec(proptest::collection::btree_set(1usize..=9, 0..5), 0..10).prop_map(|sets| {
            SegmentMapping {
                groups: sets
                    .into_iter()
                    .map(|resolved_lines| SegmentGroup {
                        code_text: String::new(),
                        explanation_portion: String::new(),
                        resolved_lines,
                        portion_verified: true,
                        lines_verified: true,
                    })
                    .collect(),
                provenance: Provenance::mock(),
                warnings: vec![],
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rules_shrink_and_are_idempotent(m in random_mapping(), drop in proptest::collection::btree_set(1usize..=9, 0..4)) {
            let mut q = testdata::sum_of_positives();
            q.drop_lines = drop;
            for rules in [vec![], vec![PostRule::SignatureOnly], vec![PostRule::DropLines], vec![PostRule::SignatureOnly, PostRule::DropLines]] {
                let once = apply_rules(&m, &rules, &q);
                prop_assert!(once.raw_count() <= m.raw_count());
                prop_assert_eq!(apply_rules(&once, &rules, &q), once.clone());
            }
        }

        #[test]
        fn threshold_monotone(n in 0usize..50, t in 1u32..20, dt in 1u32..20) {
            if classify(n, t).unwrap() == Level::Relational {
                prop_assert_eq!(classify(n, t + dt).unwrap(), Level::Relational);
            }
        }
    }
}
