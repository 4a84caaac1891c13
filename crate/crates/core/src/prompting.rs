//! Chat-message construction for a segmentation request.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::Question;
use crate::segmentation::canonical_json;

pub const TASK_INSTRUCTIONS: &str = "Task: Create a one-to-one mapping between each segment of a given \
explanation and the group of lines in the given code which that phrase is associated with. \
Not all of the description needs to be used. Not all of the code needs to be used. \
It is very important to only use the words in the user's provided explanation. \
One segment can map to multiple lines.";

pub const EXPLANATION_PREFIX: &str = "Explanation: ";

/// Name given to the output schema on the wire.
pub const SCHEMA_NAME: &str = "segmentation";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("student explanation is empty")]
    EmptyResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationRequest {
    pub question_id: String,
    pub messages: Vec<ChatMessage>,
    pub schema: Value,
}

impl SegmentationRequest {
    /// The student explanation carried by the final user turn.
    pub fn response_text(&self) -> &str {
        self.messages
            .last()
            .map(|m| m.content.strip_prefix(EXPLANATION_PREFIX).unwrap_or(&m.content))
            .unwrap_or("")
    }

    /// Few-shot (explanation, assistant JSON) pairs in prompt order.
    pub fn exemplars(&self) -> impl Iterator<Item = (&str, &str)> {
        self.messages
            .get(1..self.messages.len().saturating_sub(1))
            .unwrap_or(&[])
            .chunks_exact(2)
            .filter(|pair| pair[0].role == Role::User && pair[1].role == Role::Assistant)
            .map(|pair| {
                let user = pair[0].content.as_str();
                (
                    user.strip_prefix(EXPLANATION_PREFIX).unwrap_or(user),
                    pair[1].content.as_str(),
                )
            })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

pub fn build_system_prompt(question: &Question) -> String {
    format!("{TASK_INSTRUCTIONS}\nHere is the code:\n{}", question.code)
}

pub fn build_fewshot_messages(question: &Question) -> Vec<ChatMessage> {
    question
        .few_shot
        .iter()
        .flat_map(|ex| {
            [
                ChatMessage::new(Role::User, format!("{EXPLANATION_PREFIX}{}", ex.explanation)),
                ChatMessage::new(Role::Assistant, canonical_json(&ex.expected_mapping)),
            ]
        })
        .collect()
}

pub fn build_request(question: &Question, response_text: &str) -> Result<SegmentationRequest, PromptError> {
    if response_text.trim().is_empty() {
        return Err(PromptError::EmptyResponse);
    }
    let mut messages = Vec::with_capacity(2 + 2 * question.few_shot.len());
    messages.push(ChatMessage::new(Role::System, build_system_prompt(question)));
    messages.extend(build_fewshot_messages(question));
    messages.push(ChatMessage::new(
        Role::User,
        format!("{EXPLANATION_PREFIX}{response_text}"),
    ));
    Ok(SegmentationRequest {
        question_id: question.id.clone(),
        messages,
        schema: mapping_schema(),
    })
}

/// JSON schema for the model output: `{"groups":[{"code","explanation_portion"}]}`
/// with no other keys anywhere.
pub fn mapping_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "groups": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "code": { "type": "string" },
                        "explanation_portion": { "type": "string" }
                    },
                    "required": ["code", "explanation_portion"],
                    "additionalProperties": false
                }
            }
        },
        "required": ["groups"],
        "additionalProperties": false
    })
}
