use base64::Engine as _;
use serde::{Deserialize, Serialize};

pub const TEMPERATURE: f64 = 0.25;
pub const TOP_P: f64 = 0.1;
pub const MAX_TOKENS: u32 = 3500;

/// Asks the teacher to keep its answers machine-segmentable.
pub const SYSTEM_INSTRUCTION: &str =
    "Answer each question of the prompt in order as a numbered list, one item per question, starting with 1.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: Vec<ContentPart>,
}

/// Chat-completion request body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

fn media_type(image: &[u8]) -> &'static str {
    if image.starts_with(b"\x89PNG") {
        "image/png"
    } else if image.starts_with(b"P6") || image.starts_with(b"P3") {
        "image/x-portable-pixmap"
    } else {
        "application/octet-stream"
    }
}

impl TeacherRequest {
    /// A request with the pinned sampling parameters.
    pub fn new(model: &str, prompt: &str, image: &[u8]) -> Self {
        let data = base64::engine::general_purpose::STANDARD.encode(image);
        TeacherRequest {
            model: model.to_string(),
            messages: vec![
                Message {
                    role: "system".into(),
                    content: vec![ContentPart::Text {
                        text: SYSTEM_INSTRUCTION.into(),
                    }],
                },
                Message {
                    role: "user".into(),
                    content: vec![
                        ContentPart::Text { text: prompt.into() },
                        ContentPart::ImageUrl {
                            image_url: ImageUrl {
                                url: format!("data:{};base64,{data}", media_type(image)),
                            },
                        },
                    ],
                },
            ],
            temperature: TEMPERATURE,
            top_p: TOP_P,
            max_tokens: MAX_TOKENS,
        }
    }

    /// The user prompt text.
    pub fn prompt(&self) -> Option<&str> {
        self.messages.iter().filter(|m| m.role == "user").flat_map(|m| &m.content).find_map(|c| match c {
            ContentPart::Text { text } => Some(text.as_str()),
            ContentPart::ImageUrl { .. } => None,
        })
    }
}
