//! Instruction-data generation: the ten chain-of-thought prompt templates,
//! teacher clients (canned mock, rule-following synthetic, live HTTP), a
//! numbered-answer response parser, and dataset validation.

pub mod client;
pub mod error;
pub mod parse;
pub mod pipeline;
pub mod request;
pub mod templates;
pub mod validate;

pub use client::{LiveTeacher, MockTeacher, RefusingTransport, RetryPolicy, SyntheticTeacher, Teacher, Transport, UreqTransport};
pub use error::{Result, TeacherError};
pub use parse::{format_response, parse_qa, ParsedQa};
pub use pipeline::{generate_dataset, GenConfig, GenJob, GenReport};
pub use request::TeacherRequest;
pub use templates::{render_prompt, template, templates, PromptTemplate};
pub use validate::{validate_file, validate_records, ValidationReport, Violation, ViolationKind};

/// Lowercase hex SHA-256 of `bytes`; keys the mock response directory.
pub fn image_digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
