//! Classifies plain-English explanations of code as relational or
//! multi-structural by asking a model to segment the explanation onto the
//! lines of code it describes, then counting segments.
//!
//! The flow for one response is
//! [`prompting::build_request`] → [`backend::Backend::complete`] →
//! [`segmentation::parse_mapping`] → [`pipeline::apply_rules`] →
//! [`pipeline::classify`]; [`pipeline::grade_response`] composes it.

pub mod backend;
pub mod batch;
pub mod corpus;
pub mod evaluation;
pub mod pipeline;
pub mod prompting;
pub mod segmentation;

#[cfg(test)]
mod testdata;

pub use backend::{Backend, BackendConfig, BackendError, BackendKind, MockBackend, RawMappingText, RuleBasedBackend};
pub use corpus::{HumanLabel, Level, Question, StudentResponse};
pub use pipeline::{grade_response, ClassificationResult, PipelineConfig, PostRule};
