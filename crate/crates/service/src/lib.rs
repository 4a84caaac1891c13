//! HTTP API for the student-facing feedback UI.
//!
//! Routes:
//! - `GET /api/questions`
//! - `GET /api/questions/{id}`
//! - `POST /api/questions/{id}/segment`
//!
//! Anything else falls through to the static asset directory when one is
//! configured.

mod sessions;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use eipl_core::corpus::{is_valid_id, Question, StudentResponse};
use eipl_core::pipeline::{grade_response, ClassificationResult, GradeFailure, PipelineConfig};
use eipl_core::segmentation::locate_portion;
use eipl_core::Backend;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub use sessions::{SessionError, SessionStore};

const MAX_SESSION_ID_LEN: usize = 128;

pub struct AppState {
    pub questions: BTreeMap<String, Question>,
    pub backend: Arc<dyn Backend>,
    pub pipeline: PipelineConfig,
    pub sessions: SessionStore,
}

impl AppState {
    pub fn new(questions: BTreeMap<String, Question>, backend: Arc<dyn Backend>, pipeline: PipelineConfig) -> Self {
        Self {
            questions,
            backend,
            pipeline,
            sessions: SessionStore::in_memory(),
        }
    }

    pub fn with_sessions(mut self, sessions: SessionStore) -> Self {
        self.sessions = sessions;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSummary {
    pub id: String,
    pub title: String,
    pub language: String,
    pub line_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionDetail {
    pub id: String,
    pub title: String,
    pub code: String,
    pub max_attempts: u32,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SegmentRequest {
    pub explanation: String,
    pub session_id: String,
}

/// Either char offsets into the submitted text or, when the portion could
/// not be located, the portion itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExplanationSpan {
    Offsets { start: usize, end: usize },
    Portion { portion: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackGroup {
    pub color_index: usize,
    pub explanation_span: ExplanationSpan,
    pub code_lines: Vec<usize>,
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bar {
    pub post_count: usize,
    pub max_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub used: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackPayload {
    pub groups: Vec<FeedbackGroup>,
    pub bar: Bar,
    pub level: String,
    pub warnings: Vec<String>,
    pub attempt: Attempt,
}

impl FeedbackPayload {
    pub fn build(question: &Question, explanation: &str, result: &ClassificationResult, attempt: Attempt) -> Self {
        let groups = result
            .post_mapping
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let span = g
                    .portion_verified
                    .then(|| locate_portion(&g.explanation_portion, explanation))
                    .flatten()
                    .map(|(start, end)| ExplanationSpan::Offsets { start, end })
                    .unwrap_or_else(|| ExplanationSpan::Portion {
                        portion: g.explanation_portion.clone(),
                    });
                FeedbackGroup {
                    color_index: i,
                    explanation_span: span,
                    code_lines: g.resolved_lines.iter().copied().collect(),
                    verified: g.portion_verified && g.lines_verified,
                }
            })
            .collect();
        FeedbackPayload {
            groups,
            bar: Bar {
                post_count: result.post_count,
                max_segments: question.snippet().substantive_line_count(),
            },
            level: result.level.to_string(),
            warnings: result.warnings.clone(),
            attempt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_safe: Option<bool>,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound,
    EmptyExplanation,
    BadSession,
    AttemptsExhausted { max: u32 },
    BackendFailure,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, message, retry_safe) = match self {
            ApiError::NotFound => (StatusCode::NOT_FOUND, "NotFound", "no such question".to_string(), None),
            ApiError::EmptyExplanation => (
                StatusCode::BAD_REQUEST,
                "EmptyExplanation",
                "explanation is empty".to_string(),
                None,
            ),
            ApiError::BadSession => (
                StatusCode::BAD_REQUEST,
                "BadSession",
                format!("session_id must be 1 to {MAX_SESSION_ID_LEN} characters"),
                None,
            ),
            ApiError::AttemptsExhausted { max } => (
                StatusCode::TOO_MANY_REQUESTS,
                "AttemptsExhausted",
                format!("all {max} attempts for this question are used"),
                None,
            ),
            ApiError::BackendFailure => (
                StatusCode::BAD_GATEWAY,
                "BackendFailure",
                "could not analyse the explanation right now; this attempt was not counted".to_string(),
                Some(true),
            ),
        };
        let body = ErrorBody {
            error: error.into(),
            message,
            retry_safe,
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/questions", get(list_questions))
        .route("/api/questions/{id}", get(get_question))
        .route("/api/questions/{id}/segment", post(segment))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

fn lookup<'a>(state: &'a AppState, id: &str) -> Result<&'a Question, ApiError> {
    if !is_valid_id(id) {
        return Err(ApiError::NotFound);
    }
    state.questions.get(id).ok_or(ApiError::NotFound)
}

async fn list_questions(State(state): State<Arc<AppState>>) -> Json<Vec<QuestionSummary>> {
    Json(
        state
            .questions
            .values()
            .map(|q| QuestionSummary {
                id: q.id.clone(),
                title: q.title.clone(),
                language: q.language_tag.clone(),
                line_count: q.line_count(),
            })
            .collect(),
    )
}

async fn get_question(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<QuestionDetail>, ApiError> {
    let q = lookup(&state, &id)?;
    Ok(Json(QuestionDetail {
        id: q.id.clone(),
        title: q.title.clone(),
        code: q.code.clone(),
        max_attempts: q.max_attempts,
    }))
}

async fn segment(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<SegmentRequest>,
) -> Result<Json<FeedbackPayload>, ApiError> {
    let q = lookup(&state, &id)?;
    if body.session_id.is_empty() || body.session_id.chars().count() > MAX_SESSION_ID_LEN {
        return Err(ApiError::BadSession);
    }
    if body.explanation.trim().is_empty() {
        return Err(ApiError::EmptyExplanation);
    }
    let used = state
        .sessions
        .reserve(&body.session_id, &q.id, q.max_attempts)
        .map_err(|SessionError::Exhausted { max }| ApiError::AttemptsExhausted { max })?;
    let response = StudentResponse {
        question_id: q.id.clone(),
        response_id: format!("{}:{}:{used}", body.session_id, q.id),
        text: body.explanation.clone(),
        human_label: None,
    };
    match grade_response(q, &response, state.backend.as_ref(), &state.pipeline).await {
        Ok(result) => {
            let attempt = Attempt {
                used,
                max: q.max_attempts,
            };
            Ok(Json(FeedbackPayload::build(q, &body.explanation, &result, attempt)))
        }
        Err(e) => {
            state.sessions.refund(&body.session_id, &q.id);
            match &e.failure {
                GradeFailure::Prompt(_) => Err(ApiError::EmptyExplanation),
                failure => {
                    tracing::error!(question = %q.id, kind = failure.kind(), "grading failed: {failure}");
                    Err(ApiError::BackendFailure)
                }
            }
        }
    }
}

/// Serves until ctrl-c, then writes the session snapshot if one is
/// configured.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    let app = router(state.clone(), static_dir);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    state.sessions.save()
}
