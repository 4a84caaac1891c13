//! Concurrent grading of many responses with input-order output.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::corpus::{Question, StudentResponse};
use crate::pipeline::{grade_response, ClassificationResult, PipelineConfig};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("response `{response_id}` refers to unknown question `{question_id}`")]
    UnknownQuestion {
        response_id: String,
        question_id: String,
    },
    #[error("concurrency must be positive")]
    BadConcurrency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRow {
    pub response_id: String,
    pub question_id: String,
    pub error: RowError,
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResultRow {
    Graded(Box<ClassificationResult>),
    Failed(FailedRow),
}

impl ResultRow {
    pub fn response_id(&self) -> &str {
        match self {
            ResultRow::Graded(r) => &r.response_id,
            ResultRow::Failed(f) => &f.response_id,
        }
    }
}

/// Grades every response. Unknown question ids fail the whole batch up
/// front; per-response failures become [`ResultRow::Failed`].
pub async fn grade_batch(
    questions: &BTreeMap<String, Question>,
    responses: &[StudentResponse],
    backend: &dyn Backend,
    config: &PipelineConfig,
    concurrency: usize,
) -> Result<Vec<ResultRow>, BatchError> {
    if concurrency == 0 {
        return Err(BatchError::BadConcurrency);
    }
    let mut jobs = Vec::with_capacity(responses.len());
    for r in responses {
        let q = questions.get(&r.question_id).ok_or_else(|| BatchError::UnknownQuestion {
            response_id: r.response_id.clone(),
            question_id: r.question_id.clone(),
        })?;
        jobs.push((q, r));
    }
    // `buffered` yields in submission order whatever the completion order
    let rows = stream::iter(jobs)
        .map(|(q, r)| async move {
            match grade_response(q, r, backend, config).await {
                Ok(result) => ResultRow::Graded(Box::new(result)),
                Err(e) => ResultRow::Failed(FailedRow {
                    response_id: r.response_id.clone(),
                    question_id: r.question_id.clone(),
                    error: RowError {
                        kind: e.failure.kind().to_string(),
                        message: e.failure.to_string(),
                    },
                }),
            }
        })
        .buffered(concurrency)
        .collect()
        .await;
    Ok(rows)
}

pub fn write_results<W: Write>(rows: &[ResultRow], mut out: W) -> io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_results<R: BufRead>(input: R) -> io::Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, RuleBasedBackend};
    use crate::testdata;

    fn resp(id: &str, q: &str, text: &str) -> StudentResponse {
        StudentResponse {
            question_id: q.into(),
            response_id: id.into(),
            text: text.into(),
            human_label: None,
        }
    }

    fn bank() -> BTreeMap<String, Question> {
        let q = testdata::sum_of_positives();
        BTreeMap::from([(q.id.clone(), q)])
    }

    #[tokio::test]
    async fn preserves_order_and_isolates_failures() {
        let responses = vec![
            resp("r1", "A-Q4", testdata::STEPWISE_EXPLANATION),
            resp("r2", "A-Q4", "broken"),
            resp("r3", "A-Q4", testdata::SUMMARY_EXPLANATION),
        ];
        let mock = MockBackend::new().with_fixture("A-Q4", "broken", "{\"groups\":[{");
        let rows = grade_batch(&bank(), &responses, &mock, &PipelineConfig::default(), 2)
            .await
            .unwrap();
        let ids: Vec<_> = rows.iter().map(ResultRow::response_id).collect();
        assert_eq!(ids, ["r1", "r2", "r3"]);
        assert!(matches!(&rows[1], ResultRow::Failed(f) if f.error.kind == "MalformedJson"));
        assert!(matches!(&rows[0], ResultRow::Graded(r) if r.post_count == 5));
        assert!(matches!(&rows[2], ResultRow::Graded(r) if r.post_count == 1));

        let mut buf = Vec::new();
        write_results(&rows, &mut buf).unwrap();
        let back = read_results(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[tokio::test]
    async fn unknown_question_fails_up_front() {
        let responses = vec![resp("r1", "A-Q4", "x"), resp("r2", "Z-Q9", "y")];
        let err = grade_batch(&bank(), &responses, &RuleBasedBackend, &PipelineConfig::default(), 1)
            .await
            .unwrap_err();
        assert!(matches!(err, BatchError::UnknownQuestion { ref question_id, .. } if question_id == "Z-Q9"));
    }

    #[tokio::test]
    async fn rule_based_rows_in_order() {
        let responses: Vec<_> = (0..3).map(|i| resp(&format!("r{i}"), "A-Q4", "return x. set x to zero")).collect();
        let rows = grade_batch(&bank(), &responses, &RuleBasedBackend, &PipelineConfig::default(), 3)
            .await
            .unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| matches!(r, ResultRow::Graded(_))));
    }
}
